use blindrec::agents::{annotation_matrix, simulate_annotations, AttributeSchema};
use blindrec::checkpoint::{load_model, load_pretrained, save_model, save_pretrained};
use blindrec::data::{generate_synthetic, split_per_user, Split, SplitRatios, SyntheticSpec};
use blindrec::eval::{ranking_report, train_attacker, AttackerConfig, Factorized};
use blindrec::nn::snapshot;
use blindrec::pipeline::{init_model, run_pretrain, run_stage1, run_stage2, SensitiveInputs};
use blindrec::{MiConfig, TrainingConfig};
use ndarray::array;

fn setup() -> (blindrec::InteractionDataset, blindrec::GroundTruthLabels, SensitiveInputs, TrainingConfig) {
    let spec = SyntheticSpec { user_count: 200, item_count: 80, interactions_per_user: 15, seed: 3, ..Default::default() };
    let (ds, truth, _) = generate_synthetic(&spec).unwrap();
    let ds = split_per_user(&ds, SplitRatios::default(), 3).unwrap();
    let f = array![[0.85, 0.15], [0.15, 0.85]];
    let records = simulate_annotations(&truth, &[f.clone(), f.clone(), f], &AttributeSchema::gender(), 3).unwrap();
    let inputs = SensitiveInputs {
        annotations: annotation_matrix(&records, 200, 3).unwrap(),
        rationales: None,
        persona_embeddings: None,
    };
    let config = TrainingConfig {
        dim: 8,
        lr: 1e-2,
        pretrain_epochs: 10,
        stage1_epochs: 10,
        stage2_epochs: 4,
        lambda_fine: 0.0,
        lambda_sim: 0.0,
        mi: MiConfig { lambda_ub: 1.0, ..MiConfig::default() },
        ..Default::default()
    };
    (ds, truth, inputs, config)
}

#[test]
fn stage2_leaves_the_sensitive_branch_and_pretrained_tables_untouched() {
    let (ds, _, inputs, config) = setup();
    let (pre, _) = run_pretrain(&ds, &config, 1).unwrap();
    let mut model = init_model(&pre, 2, &inputs, &config, 1).unwrap();
    run_stage1(&mut model, &ds, &inputs, &config, 1).unwrap();
    let mut frozen_before = model.clone();
    let mut cf_before = pre.tables().clone();
    run_stage2(&mut model, &ds, &pre, &config, 1).unwrap();
    for prefix in ["sens", "cls", "confusion"] {
        let keep = |m: &mut blindrec::FairModel| {
            snapshot(m, "").into_iter().filter(|(k, _)| k.starts_with(prefix)).collect::<Vec<_>>()
        };
        assert_eq!(keep(&mut frozen_before), keep(&mut model), "{prefix} changed during stage 2");
    }
    assert_eq!(snapshot(&mut cf_before, ""), snapshot(&mut pre.tables().clone(), ""));
    // The preference encoder did train.
    let pref = |m: &mut blindrec::FairModel| snapshot(m, "pref");
    assert_ne!(pref(&mut frozen_before), pref(&mut model));
}

#[test]
fn checkpoints_resume_bit_exactly() {
    let (ds, _, inputs, config) = setup();
    let dir = tempfile::tempdir().unwrap();
    let (pre, _) = run_pretrain(&ds, &config, 2).unwrap();
    save_pretrained(&dir.path().join("pre"), &pre, 2).unwrap();
    let pre_back = load_pretrained(&dir.path().join("pre")).unwrap();
    assert_eq!(pre_back.tables(), pre.tables());

    let mut model = init_model(&pre, 2, &inputs, &config, 2).unwrap();
    run_stage1(&mut model, &ds, &inputs, &config, 2).unwrap();
    save_model(&dir.path().join("s1"), &model, "stage1", 2, serde_json::json!({})).unwrap();
    let (mut resumed, _) = load_model(&dir.path().join("s1")).unwrap();
    assert_eq!(resumed, model);

    // Stage 2 from the reloaded checkpoint matches stage 2 in memory.
    run_stage2(&mut model, &ds, &pre, &config, 2).unwrap();
    run_stage2(&mut resumed, &ds, &pre_back, &config, 2).unwrap();
    assert_eq!(resumed, model);
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let (ds, truth, inputs, config) = setup();
    let (pre, _) = run_pretrain(&ds, &config, 4).unwrap();
    let mut model = init_model(&pre, 2, &inputs, &config, 4).unwrap();
    run_stage1(&mut model, &ds, &inputs, &config, 4).unwrap();
    run_stage2(&mut model, &ds, &pre, &config, 4).unwrap();
    let before = model.clone();
    let p = model.fair_embeddings();
    let evaluate = || {
        let rank = ranking_report(&Factorized::new(&p, &model.tables.items), &ds, Split::Test, 20).unwrap();
        let attack = train_attacker(&p, &truth, 9, &AttackerConfig::default()).unwrap();
        (rank, attack)
    };
    let (r1, a1) = evaluate();
    let (r2, a2) = evaluate();
    assert_eq!(r1, r2);
    assert_eq!(a1, a2);
    assert_eq!(model, before);
    assert!((0.0..=1.0).contains(&r1.recall_at_k));
    assert_eq!(a1.n_train + a1.n_test, 200);
    assert_eq!(a1.n_test, 40);
}
