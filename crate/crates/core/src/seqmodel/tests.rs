use super::*;
use rand::Rng;

fn small(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        context_length: 12,
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        d_ff: 32,
        seed: 5,
    }
}

fn random_batch(rng: &mut impl Rng, batch: usize, len: usize, vocab: usize) -> TokenBatch {
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|b| (0..len - b % 3).map(|_| rng.gen_range(0..vocab)).collect())
        .collect();
    TokenBatch::left_padded(&seqs, 0)
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let a = Parameters::<f32>::init(small(10)).unwrap();
    let b = Parameters::<f32>::init(small(10)).unwrap();
    assert_eq!(a, b);
    let c = Parameters::<f32>::init(ModelConfig { seed: 6, ..small(10) }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn head_count_must_divide_width() {
    let cfg = ModelConfig { d_model: 17, ..small(10) };
    assert!(matches!(Parameters::<f32>::init(cfg), Err(ModelError::Config(_))));
}

#[test]
fn logits_have_position_by_vocab_shape() {
    let p = Parameters::<f64>::init(ModelConfig { vocab_size: 32, ..small(32) }).unwrap();
    let batch = TokenBatch::left_padded(&[(0..8).collect()], 0);
    let (logits, _) = p.forward(&batch).unwrap();
    assert_eq!(logits.dim(), (8, 32));
}

#[test]
fn overlong_sequence_is_rejected() {
    let p = Parameters::<f32>::init(small(10)).unwrap();
    let batch = TokenBatch::left_padded(&[vec![1; 13]], 0);
    assert!(matches!(p.forward(&batch), Err(ModelError::TooLong { .. })));
}

#[test]
fn future_tokens_do_not_leak() {
    let p = Parameters::<f64>::init(small(10)).unwrap();
    let a: Vec<usize> = vec![3, 1, 4, 1, 5, 9, 2, 6];
    let mut b = a.clone();
    b[5..].reverse();
    b[7] = 0;
    let (la, _) = p.forward(&TokenBatch::left_padded(&[a], 0)).unwrap();
    let (lb, _) = p.forward(&TokenBatch::left_padded(&[b], 0)).unwrap();
    for t in 0..5 {
        assert_eq!(la.row(t), lb.row(t));
    }
    assert_ne!(la.row(7), lb.row(7));
}

#[test]
fn left_padding_does_not_change_real_logits() {
    let p = Parameters::<f64>::init(small(10)).unwrap();
    let seq = vec![2, 7, 1, 8];
    let (alone, _) = p.forward(&TokenBatch::left_padded(std::slice::from_ref(&seq), 0)).unwrap();
    let batch = TokenBatch::left_padded(&[seq, vec![1, 2, 3, 4, 5, 6, 7]], 0);
    let (padded, _) = p.forward(&batch).unwrap();
    for t in 0..4 {
        for (x, y) in alone.row(t).iter().zip(padded.row(3 + t).iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_head_gives_flat_logits() {
    let mut p = Parameters::<f64>::init(small(10)).unwrap();
    p.head.fill(0.0);
    let (logits, _) = p.forward(&TokenBatch::left_padded(&[vec![1, 2, 3]], 0)).unwrap();
    for row in logits.rows() {
        assert!(row.iter().all(|&x| x == row[0]));
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let p = Parameters::<f64>::init(small(10)).unwrap();
    let batch = TokenBatch::left_padded(&[vec![1, 2, 3]], 0);
    let (logits, cache) = p.forward(&batch).unwrap();
    let g = p.backward(&cache, &Array2::zeros(logits.dim())).unwrap();
    assert!(g.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
}

#[test]
fn unused_positions_get_no_gradient() {
    let p = Parameters::<f64>::init(small(10)).unwrap();
    let batch = TokenBatch::left_padded(&[vec![1, 2, 3], vec![4, 5, 6, 7, 8]], 0);
    let (logits, cache) = p.forward(&batch).unwrap();
    let g = p.backward(&cache, &Array2::ones(logits.dim())).unwrap();
    for pos in 5..12 {
        assert!(g.pos_emb.row(pos).iter().all(|&x| x == 0.0), "row {pos}");
    }
    assert!(g.pos_emb.row(4).iter().any(|&x| x != 0.0));
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let vocab = 9;
    let p = Parameters::<f64>::init(small(vocab)).unwrap();
    // larger weights exercise the nonlinearities beyond their linear regime
    let mut p = p;
    for mut t in p.tensors_mut() {
        t.mapv_inplace(|x| x * 10.0 + rng.gen_range(-0.05..0.05));
    }
    let batch = random_batch(&mut rng, 3, 6, vocab);
    let (logits, cache) = p.forward(&batch).unwrap();
    let w = Array2::from_shape_simple_fn(logits.dim(), || rng.gen_range(-1.0..1.0));
    let objective = |q: &Parameters<f64>| (q.forward(&batch).unwrap().0 * &w).sum();
    let grads = p.backward(&cache, &w).unwrap();
    let h = 1e-5;
    let names = p.tensor_names();
    let n_tensors = names.len();
    let mut worst = 0.0f64;
    for ti in 0..n_tensors {
        let len = p.tensors()[ti].len();
        let picks: Vec<usize> = if len <= 24 { (0..len).collect() } else { (0..24).map(|_| rng.gen_range(0..len)).collect() };
        let analytic: Vec<f64> = picks.iter().map(|&k| grads.tensors()[ti].iter().nth(k).copied().unwrap()).collect();
        let mut numeric = Vec::new();
        for &k in &picks {
            let mut q = p.clone();
            *q.tensors_mut()[ti].iter_mut().nth(k).unwrap() += h;
            let up = objective(&q);
            *q.tensors_mut()[ti].iter_mut().nth(k).unwrap() -= 2.0 * h;
            let down = objective(&q);
            numeric.push((up - down) / (2.0 * h));
        }
        let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            continue;
        }
        let err = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale;
        assert!(err < 1e-5, "{}: relative error {err:e}", names[ti]);
        worst = worst.max(err);
    }
    println!("worst relative error {worst:e}");
}

#[test]
fn adam_without_gradient_or_decay_is_identity() {
    let mut p = Parameters::<f32>::init(small(10)).unwrap();
    let before = p.clone();
    let grads = p.zeros_like();
    let mut state = AdamState::new(&p);
    let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
    adam_step(&mut p, &grads, &mut state, &cfg);
    assert_eq!(p, before);
    assert_eq!(state.step, 1);
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let mut p = Parameters::<f64>::init(small(10)).unwrap();
    let before = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut grads = p.zeros_like();
    for mut t in grads.tensors_mut() {
        t.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
    }
    let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
    let mut state = AdamState::new(&p);
    adam_step(&mut p, &grads, &mut state, &cfg);
    // at t=1 the corrected step is lr·g/(|g| + eps)
    for ((a, b), g) in p.tensors().iter().zip(before.tensors()).zip(grads.tensors()) {
        for ((&x, &y), &g) in a.iter().zip(b.iter()).zip(g.iter()) {
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((x - y - expected).abs() < 1e-15);
            assert!((x - y).abs() <= cfg.lr);
        }
    }
}

#[test]
fn default_weight_decay() {
    assert_eq!(AdamConfig::default().weight_decay, 0.01);
    assert_eq!(AdamConfig::default().lr, 1e-4);
}

#[test]
fn greedy_generation_basics() {
    let p = Parameters::<f32>::init(small(10)).unwrap();
    assert_eq!(p.generate_greedy(&[1, 2], 0, None).unwrap(), vec![1, 2]);
    let a = p.generate_greedy(&[1, 2], 5, None).unwrap();
    assert_eq!(a, p.generate_greedy(&[1, 2], 5, None).unwrap());
    assert_eq!(a.len(), 7);
    let capped = p.generate_greedy(&[1; 10], 5, None).unwrap();
    assert_eq!(capped.len(), 12);
}

#[test]
fn greedy_ties_go_to_lowest_id() {
    let mut p = Parameters::<f32>::init(small(10)).unwrap();
    p.head.fill(0.0);
    assert_eq!(p.generate_greedy(&[4], 3, None).unwrap(), vec![4, 0, 0, 0]);
}

#[test]
fn batched_generation_matches_single() {
    let p = Parameters::<f64>::init(small(10)).unwrap();
    let prompts = vec![vec![1, 2, 3], vec![5], vec![9, 8, 7, 6, 5]];
    let batched = p.generate_greedy_batch(&prompts, 4, Some(0)).unwrap();
    for (pr, out) in prompts.iter().zip(&batched) {
        assert_eq!(&p.generate_greedy(pr, 4, Some(0)).unwrap(), out);
    }
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let p = Parameters::<f32>::init(small(10)).unwrap();
    let mut state = AdamState::new(&p);
    state.step = 17;
    state.m.head.fill(0.25);
    let ck = Checkpoint {
        params: p,
        optimizer: Some(state),
        metadata: "lambda = 0.3\n".into(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ntlf");
    write_checkpoint(&path, &ck).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), ck);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ck = Checkpoint {
        params: Parameters::<f32>::init(small(10)).unwrap(),
        optimizer: None,
        metadata: String::new(),
    };
    let bytes = ck.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(ModelError::Checkpoint(_))));
    let mut future = bytes.clone();
    future[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&future), Err(ModelError::Version(9))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
