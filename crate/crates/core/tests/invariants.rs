mod common;

use arbo::autodiff::softmax;
use arbo::model::{infer, run_tree, Dropout, FlatTree, ModelConfig, ModelParams, Variant};
use arbo::synth::random_tree;
use arbo::training::{batch_gradient, random_params, sentence_gradient};
use arbo::treebank::{parse_tree, LabeledTree};
use common::{max_abs_diff, sample_tree, sample_vocab, VARIANTS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params_for(variant: Variant, attention: bool, seed: u64, scale: f64) -> ModelParams<f64> {
    let config = ModelConfig::new(variant, attention, 4, sample_vocab().len(), 5);
    random_params(config, scale, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn mirror(t: &LabeledTree) -> LabeledTree {
    let mut m = t.clone();
    m.children = t.children.iter().rev().map(mirror).collect();
    m
}

fn swap_positions(p: &mut ModelParams<f64>) {
    for g in ["z", "r", "h"] {
        let a = p.id(&format!("up.W_{g}.1")).unwrap();
        let b = p.id(&format!("up.W_{g}.2")).unwrap();
        let tmp = p.tensors[a].data.clone();
        p.tensors[a].data = p.tensors[b].data.clone();
        p.tensors[b].data = tmp;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trees_round_trip_through_text(
        seed in any::<u64>(),
        words in prop::collection::vec("[a-zA-Z0-9.,'!?-]{1,8}", 1..6),
    ) {
        let tree = random_tree(&mut ChaCha8Rng::seed_from_u64(seed), &words, 15, 0.3);
        let text = tree.to_string();
        let back = parse_tree(&text).unwrap();
        prop_assert_eq!(&back, &tree);
        prop_assert_eq!(back.to_string(), text.clone());
        prop_assert_eq!(tree.node_count(), text.matches('(').count());
    }

    #[test]
    fn gates_stay_strictly_inside_the_unit_interval(seed in any::<u64>(), which in 0usize..4) {
        let (variant, attention) = VARIANTS[which];
        let params = params_for(variant, attention, seed, 2.0);
        let tree = sample_tree(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), 15);
        let flat = FlatTree::new(&tree, &sample_vocab());
        let states = run_tree(&params, &flat, None).unwrap().states();
        let all = states.up.iter().chain(states.down.iter().flatten());
        for g in all {
            if let Some([z, r, _]) = &g.gates {
                prop_assert!(z.iter().chain(r).all(|&x| x > 0.0 && x < 1.0));
            }
        }
    }

    #[test]
    fn attention_weights_form_a_distribution(seed in any::<u64>(), bi in any::<bool>()) {
        let variant = if bi { Variant::TreeBiGru } else { Variant::TreeGru };
        let params = params_for(variant, true, seed, 1.5);
        let tree = sample_tree(&mut ChaCha8Rng::seed_from_u64(seed ^ 2), 15);
        let flat = FlatTree::new(&tree, &sample_vocab());
        let a = infer(&params, &flat).unwrap().attention.unwrap();
        prop_assert_eq!(a.weights.len(), tree.node_count());
        prop_assert!(a.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_ignores_a_constant_shift(
        xs in prop::collection::vec(-30.0f64..30.0, 1..10),
        c in -100.0f64..100.0,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!(max_abs_diff(&softmax(&xs), &softmax(&shifted)) < 1e-12);
    }

    #[test]
    fn mirroring_the_tree_and_position_weights_preserves_states(seed in any::<u64>(), which in 0usize..4) {
        let (variant, attention) = VARIANTS[which];
        let params = params_for(variant, attention, seed, 1.0);
        let mut swapped = params.clone();
        swap_positions(&mut swapped);
        let words = common::sample_vocab().words()[1..].to_vec();
        let tree = random_tree(&mut ChaCha8Rng::seed_from_u64(seed ^ 3), &words, 15, 0.0);
        let vocab = sample_vocab();
        let a = FlatTree::new(&tree, &vocab);
        let b = FlatTree::new(&mirror(&tree), &vocab);
        let ra = infer(&params, &a).unwrap();
        let rb = infer(&swapped, &b).unwrap();
        prop_assert!(max_abs_diff(ra.root_distribution(), rb.root_distribution()) < 1e-12);
        let sa = run_tree(&params, &a, None).unwrap().states();
        let sb = run_tree(&swapped, &b, None).unwrap().states();
        let root = |s: &arbo::model::NodeStates<f64>| s.up.last().unwrap().h.clone();
        prop_assert!(max_abs_diff(&root(&sa), &root(&sb)) < 1e-12);
        if let (Some(x), Some(y)) = (ra.attention, rb.attention) {
            let mut wx = x.weights.clone();
            let mut wy = y.weights.clone();
            wx.sort_by(f64::total_cmp);
            wy.sort_by(f64::total_cmp);
            prop_assert!(max_abs_diff(&wx, &wy) < 1e-12);
        }
    }

    #[test]
    fn zeroed_downward_weights_reduce_to_the_unidirectional_model(seed in any::<u64>()) {
        let mut bi = params_for(Variant::TreeBiGru, false, seed, 1.0);
        bi.zero_downward();
        bi.get_mut("cls.W_down").unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        let mut uni = params_for(Variant::TreeGru, false, seed, 1.0);
        for t in &mut uni.tensors {
            let src = if t.name == "cls.W_s" { "cls.W_up" } else { t.name.as_str() };
            t.data = bi.get(src).unwrap().data.clone();
        }
        let tree = sample_tree(&mut ChaCha8Rng::seed_from_u64(seed ^ 4), 15);
        let flat = FlatTree::new(&tree, &sample_vocab());
        let sb = run_tree(&bi, &flat, None).unwrap().states();
        let su = run_tree(&uni, &flat, None).unwrap().states();
        for (x, y) in sb.up.iter().zip(&su.up) {
            prop_assert!(max_abs_diff(&x.h, &y.h) < 1e-12);
        }
        let db = infer(&bi, &flat).unwrap().distributions;
        let du = infer(&uni, &flat).unwrap().distributions;
        for (x, y) in db.iter().zip(&du) {
            prop_assert!(max_abs_diff(x, y) < 1e-12);
        }
    }

    #[test]
    fn batch_gradient_is_the_sum_of_sentence_gradients(seed in any::<u64>(), which in 0usize..4) {
        let (variant, attention) = VARIANTS[which];
        let params = params_for(variant, attention, seed, 0.5);
        let vocab = sample_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let flats: Vec<FlatTree> = (0..5).map(|_| FlatTree::new(&sample_tree(&mut rng, 11), &vocab)).collect();
        let refs: Vec<&FlatTree> = flats.iter().collect();
        let batch = batch_gradient(&params, &refs, &[0, 1, 2, 3, 4], 0.0, 1, 0).unwrap();

        let mut loss = 0.0;
        let mut dense: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        for f in &flats {
            let (l, g) = sentence_gradient(&params, f, None).unwrap();
            loss += l;
            for (id, v) in &g.dense {
                dense[*id].iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
            for ((id, row), v) in &g.rows {
                let cols = params.tensors[*id].shape.cols;
                dense[*id][row * cols..(row + 1) * cols].iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
        prop_assert!((batch.data_loss - loss).abs() < 1e-10);
        for (id, expect) in dense.iter().enumerate() {
            let cols = params.tensors[id].shape.cols;
            let mut got = batch.grads.dense.get(&id).cloned().unwrap_or_else(|| vec![0.0; expect.len()]);
            for ((tid, row), v) in &batch.grads.rows {
                if *tid == id {
                    got[row * cols..(row + 1) * cols].iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
            }
            prop_assert!(max_abs_diff(&got, expect) < 1e-10, "tensor {}", params.tensors[id].name);
        }
    }
}

#[test]
fn evaluation_ignores_dropout_and_is_repeatable() {
    let vocab = sample_vocab();
    for (variant, attention) in VARIANTS {
        let params = params_for(variant, attention, 9, 1.0);
        let tree = sample_tree(&mut ChaCha8Rng::seed_from_u64(10), 15);
        let flat = FlatTree::new(&tree, &vocab);
        let first = infer(&params, &flat).unwrap();
        let second = infer(&params, &flat).unwrap();
        assert_eq!(first, second);

        // A zero-rate mask is the identity, whatever the generator state.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let run = run_tree(
            &params,
            &flat,
            Some(Dropout {
                rate: 0.0,
                rng: &mut rng,
            }),
        )
        .unwrap();
        assert_eq!(run.distributions(), first.distributions);
    }
}

#[test]
fn evaluation_does_not_depend_on_thread_count() {
    use arbo::training::evaluate;
    let vocab = sample_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let flats: Vec<FlatTree> = (0..40)
        .map(|_| FlatTree::new(&sample_tree(&mut rng, 15), &vocab))
        .collect();
    let params = params_for(Variant::TreeBiGru, true, 13, 1.0);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&params, &flats, arbo::treebank::Task::Fine).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one.loss.to_bits(), run(3).loss.to_bits());
}
