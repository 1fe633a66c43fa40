use blindrec::agents::{
    simulate_annotations, verbalize, AttributeSchema, CompletionBackend, CompletionRequest, DecodeParams,
    HashEmbedder, RequestContext, SimulatedBackend, TextEmbedder,
};
use blindrec::data::{generate_synthetic, split_per_user, Split, SplitRatios, SyntheticSpec, Visibility};
use blindrec::encoders::{epoch_batches, sample_negatives, EmbeddingTables};
use blindrec::eval::{auc_binary, majority_vote, recall_at_k, ndcg_at_k};
use blindrec::mi::{cosine_scores, info_nce, loss_lb, loss_ub};
use blindrec::model::{ModelDims, VariationalNet, LOGVAR_MAX, LOGVAR_MIN};
use blindrec::nn::Parameterized;
use blindrec::sensitive::consensus_neighbors;
use blindrec::{rng, FairModel, GroundTruthLabels, InteractionDataset};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn small_dataset() -> impl Strategy<Value = InteractionDataset> {
    (3usize..8, 6usize..12, any::<u64>()).prop_map(|(m, n, seed)| {
        let mut r = rng::rng(seed);
        let mut pairs = Vec::new();
        for u in 0..m {
            let mut items: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(items.as_mut_slice(), &mut r);
            let take = 3 + (seed as usize + u) % (n - 4);
            pairs.extend(items[..take].iter().map(|&v| (u, v)));
        }
        let ds = InteractionDataset::from_pairs(m, n, &pairs).unwrap();
        split_per_user(&ds, SplitRatios::default(), seed).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn synthetic_data_respects_dataset_invariants(users in 20usize..80, ipu in 10usize..20, mix in 0.5f64..=1.0, seed in any::<u64>()) {
        let spec = SyntheticSpec { user_count: users, item_count: 60, interactions_per_user: ipu, preference_mix: mix, seed, ..Default::default() };
        let (ds, truth, titles) = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(ds.user_count(), users);
        prop_assert_eq!(titles.len(), 60);
        prop_assert_eq!(truth.labels.len(), users);
        for u in 0..users {
            let known = ds.known_items(u);
            prop_assert_eq!(known.len(), ipu);
            prop_assert!(known.windows(2).all(|w| w[0] < w[1]) && known.iter().all(|&v| v < 60));
        }
        let ds = split_per_user(&ds, SplitRatios::default(), seed).unwrap();
        for u in 0..users {
            let (tr, va, te) = ds.split_sizes(u);
            prop_assert_eq!(tr + va + te, ipu);
            prop_assert!((va as f64 - 0.1 * ipu as f64).abs() <= 1.0);
            prop_assert!((te as f64 - 0.1 * ipu as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn bpr_negatives_lie_outside_the_history(ds in small_dataset(), seed in any::<u64>()) {
        for batch in epoch_batches(&ds, 7, seed, 0) {
            let b = sample_negatives(&ds, &batch, seed).unwrap();
            for &(u, pos, neg) in &b.triplets {
                prop_assert!(ds.user_history(u, Split::Train).unwrap().contains(&pos));
                prop_assert!(!ds.has_interaction(u, neg));
            }
        }
    }

    #[test]
    fn networks_emit_valid_outputs(users in matrix(5, 4), seed in any::<u64>(), scale in 1.0f64..1e3) {
        let dims = ModelDims { users: 5, items: 3, dim: 4, arity: 3, annotators: 2, embed_dim: 6 };
        let tables = EmbeddingTables { users: &users * scale, items: Array2::zeros((3, 4)) };
        let mut model = FairModel::new(dims, tables, 2.0, seed).unwrap();
        let mut r = rng::rng(seed);
        model.visit_params("confusion", &mut |_, v| v.iter_mut().for_each(|x| *x = rand::Rng::random_range(&mut r, -5.0..5.0)));
        prop_assert!(model.sensitive_embeddings().iter().all(|x| x.is_finite()));
        prop_assert!(model.fair_embeddings().iter().all(|x| x.is_finite()));
        // Probabilities stay strictly inside (0, 1) for rows of realistic size;
        // far larger inputs saturate the softmax in f64.
        let moderate = FairModel::new(dims, EmbeddingTables { users: users.clone(), items: Array2::zeros((3, 4)) }, 2.0, seed).unwrap();
        let c = moderate.class_probs();
        for row in c.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
        }
        for i in 0..2 {
            for row in model.confusion.realized(i).rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }
        let e = Array2::from_elem((2, 6), 1.0);
        prop_assert_eq!(model.proj.forward(e.view()).ncols(), 4);
        let out = model.var.forward((&users * scale * 100.0).view());
        prop_assert!(out.logvar.iter().all(|&x| (LOGVAR_MIN..=LOGVAR_MAX).contains(&x)));
    }

    #[test]
    fn consensus_graph_excludes_self_and_keeps_k(e in matrix(6, 3), k in 1usize..5) {
        let g = consensus_neighbors(&e, k).unwrap();
        for (i, ns) in g.neighbors.iter().enumerate() {
            prop_assert!(!ns.contains(&i));
            prop_assert!(ns.len() >= k);
        }
    }

    #[test]
    fn info_nce_estimate_is_bounded_by_log_batch(scores in matrix(6, 6)) {
        let (loss, _) = info_nce(&scores);
        prop_assert!(loss >= 0.0);
        prop_assert!(6f64.ln() - loss <= 6f64.ln());
    }

    #[test]
    fn cosine_scores_ignore_positive_row_scaling(h in matrix(4, 3), r in matrix(5, 3), scale in prop::collection::vec(0.1f64..10.0, 5)) {
        prop_assume!(r.rows().into_iter().all(|x| x.dot(&x) > 1e-6));
        let mut rs = r.clone();
        for (mut row, s) in rs.rows_mut().into_iter().zip(&scale) {
            row *= *s;
        }
        let (a, b) = (cosine_scores(&h, &r), cosine_scores(&h, &rs));
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn lower_bound_loss_is_non_negative(r in matrix(5, 3), s in matrix(5, 3), p in matrix(5, 3)) {
        prop_assert!(loss_lb(&r, &s, &p, 0.1).0 >= 0.0);
    }

    #[test]
    fn ranking_metrics_are_bounded_and_monotone_invariant(ds in small_dataset(), seed in any::<u64>()) {
        let mut r = rng::rng(seed);
        let scores = Array2::from_shape_fn((ds.user_count(), ds.item_count()), |_| rand::Rng::random_range(&mut r, -1.0..1.0));
        let transformed = scores.mapv(|x: f64| (3.0 * x).exp() + 7.0);
        for k in [1, 3, 5] {
            let (r1, n1) = (recall_at_k(&scores, &ds, Split::Test, k).unwrap(), ndcg_at_k(&scores, &ds, Split::Test, k).unwrap());
            let (r2, n2) = (recall_at_k(&transformed, &ds, Split::Test, k).unwrap(), ndcg_at_k(&transformed, &ds, Split::Test, k).unwrap());
            prop_assert!((0.0..=1.0).contains(&r1.value) && (0.0..=1.0).contains(&n1.value));
            prop_assert_eq!(&r1, &r2);
            prop_assert_eq!(&n1, &n2);
            let mean = r1.per_user.iter().map(|p| p.1).sum::<f64>() / r1.per_user.len() as f64;
            prop_assert!((mean - r1.value).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(scores in prop::collection::vec(-5.0f64..5.0, 2..30), seed in any::<u64>()) {
        let n = scores.len();
        let pos: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
        let t: Vec<f64> = scores.iter().map(|x| x.powi(3) + 2.0 * x).collect();
        prop_assert_eq!(auc_binary(&scores, &pos).unwrap(), auc_binary(&t, &pos).unwrap());
    }

    #[test]
    fn majority_vote_is_modal_and_abstains_on_ties(votes in prop::collection::vec(prop::option::of(0usize..3), 1..9)) {
        let mut counts = [0usize; 3];
        for v in votes.iter().flatten() {
            counts[*v] += 1;
        }
        let best = *counts.iter().max().unwrap();
        let modes: Vec<usize> = (0..3).filter(|&c| counts[c] == best).collect();
        let want = if best == 0 || modes.len() > 1 { None } else { Some(modes[0]) };
        prop_assert_eq!(majority_vote(&votes), want);
    }

    #[test]
    fn hash_embedder_is_a_function_of_text(text in "[a-z ]{1,40}", dim in 1usize..64, seed in any::<u64>()) {
        prop_assume!(!text.trim().is_empty());
        let e = HashEmbedder::new(dim, seed).unwrap();
        let v = e.embed(&text).unwrap();
        prop_assert_eq!(v.len(), dim);
        prop_assert_eq!(v, e.embed(&text).unwrap());
    }

    #[test]
    fn simulated_records_verbalize_to_their_label(seed in any::<u64>(), acc in 0.5f64..1.0) {
        let mut r = rng::rng(seed);
        let labels: Vec<usize> = (0..30).map(|_| rand::Rng::random_range(&mut r, 0..2)).collect();
        let truth = GroundTruthLabels::new(labels, 2, Visibility::Simulation).unwrap();
        let f = array![[acc, 1.0 - acc], [1.0 - acc, acc]];
        let schema = AttributeSchema::gender();
        let records = simulate_annotations(&truth, &[f.clone(), f.clone()], &schema, seed).unwrap();
        prop_assert_eq!(&records, &simulate_annotations(&truth, &[f.clone(), f.clone()], &schema, seed).unwrap());
        for rec in &records {
            prop_assert_eq!(verbalize(&rec.raw_text, &schema).unwrap(), rec.label);
        }
        // The backend answers the same request identically every time.
        let sim = SimulatedBackend::new(truth, vec![f.clone(), f], schema, seed).unwrap();
        let req = CompletionRequest {
            system: "s".into(),
            user: "u".into(),
            decode: DecodeParams::default(),
            context: RequestContext::Annotate { user: 3, annotator: 1 },
        };
        prop_assert_eq!(sim.complete(&req).unwrap(), sim.complete(&req).unwrap());
    }
}

#[test]
fn upper_bound_vanishes_for_constant_variational_output() {
    let mut net = VariationalNet::with_hidden(3, 5, &mut rng::rng(1));
    // Zero output layers make mu and logvar constant across the batch.
    for head in [&mut net.mu, &mut net.logvar] {
        let last = head.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.25);
    }
    let mut r = rng::rng(2);
    let s = Array2::from_shape_fn((8, 3), |_| rand::Rng::random_range(&mut r, -2.0..2.0));
    let p = Array2::from_shape_fn((8, 3), |_| rand::Rng::random_range(&mut r, -2.0..2.0));
    assert_eq!(loss_ub(&net, &s, &p).unwrap().0, 0.0);
}

#[test]
fn planted_preference_mix_is_recovered() {
    let spec = SyntheticSpec { user_count: 2000, item_count: 200, interactions_per_user: 20, preference_mix: 0.8, seed: 9, ..Default::default() };
    let (ds, truth, _) = generate_synthetic(&spec).unwrap();
    let total = ds.interactions().len() as f64;
    let own = ds.interactions().iter().filter(|it| spec.cluster_of(it.item) == truth.labels[it.user]).count() as f64;
    let frac = own / total;
    let se = (0.8f64 * 0.2 / total).sqrt();
    assert!((frac - 0.8).abs() <= 3.0 * se, "in-cluster fraction {frac} vs 0.8 +/- {}", 3.0 * se);
}
