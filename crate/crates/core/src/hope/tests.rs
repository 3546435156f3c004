use super::*;
use crate::numerics::{finite_diff_check, flop_count, reset_flop_count, Rng, RngState, Tensor};
use crate::preprocess::{PatchEmbedding, PatchedBatch};

fn rand_tensor(shape: &[usize], rng: &mut Rng, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rng.normal_vec(n, std)).unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projection loss with fixed random weights so that every output element
/// contributes an O(1) gradient.
fn probe_loss(y: &Tensor, r: &Tensor) -> crate::Result<Tensor> {
    Ok(y.mul(r)?.sum_all())
}

fn plain_layout(b: usize, t: usize, chunk: usize) -> ScanLayout {
    ScanLayout::new(b, t, chunk, false, None).unwrap()
}

#[test]
fn layout_chunks_and_read_rows() {
    let l = ScanLayout::new(1, 10, 4, true, None).unwrap();
    assert_eq!(l.scanned(), 9);
    assert_eq!(l.n_chunks(), 3);
    assert_eq!(l.chunk_tokens(2), 9..10);
    assert_eq!(l.read_index(), vec![3, 0, 0, 0, 0, 1, 1, 1, 1, 2]);
    assert!(ScanLayout::new(1, 1, 4, true, None).is_err());
    assert!(ScanLayout::new(2, 4, 2, false, Some(vec![true; 7])).is_err());
}

#[test]
fn titans_zero_write_rate_keeps_initial_memory() {
    let mut rng = RngState::new(1).rng();
    let d = 4;
    let x = rand_tensor(&[1, 5, d], &mut rng, 1.0);
    let mut p = TitansParams::init(d, &mut rng);
    p.overrides.theta = Some(0.0);
    let mut init = TitansState::zeros(1, d);
    init.m[0] = rng.normal_vec(d * d, 1.0);
    let (y, fin) = titans_forward(&x, &p, &plain_layout(1, 5, 2), Some(&init)).unwrap();
    let keep = 1.0 - p.rates().0.item();
    let q = x.matmul(&p.w_q).unwrap().to_vec();
    // With θ = 0 the memory only decays: M_t = keep^t M_0.
    for t in 0..5 {
        for i in 0..d {
            let want = keep.powi(t as i32 + 1) * dot(&init.m[0][i * d..(i + 1) * d], &q[t * d..(t + 1) * d]);
            assert!((y.data()[t * d + i] - want).abs() < 1e-12);
        }
    }
    p.overrides.alpha = Some(0.0);
    let (y, fin2) = titans_forward(&x, &p, &plain_layout(1, 5, 2), Some(&init)).unwrap();
    assert_eq!(fin2.m, init.m);
    for t in 0..5 {
        for i in 0..d {
            let want = dot(&init.m[0][i * d..(i + 1) * d], &q[t * d..(t + 1) * d]);
            assert!((y.data()[t * d + i] - want).abs() < 1e-12);
        }
    }
    assert!(fin.is_finite());
}

#[test]
fn titans_single_token_closed_form() {
    let d = 3;
    let q = vec![0.3, -1.2, 0.5];
    let k = unit(&[1.0, 2.0, -2.0]);
    let v = vec![2.0, 0.0, -1.0];
    for eta in [0.0, 0.4, 0.9] {
        let theta = 0.35;
        let (y, _) = titans_scan(
            &Tensor::from_vec(&[1, 1, d], q.clone()).unwrap(),
            &Tensor::from_vec(&[1, 1, d], k.clone()).unwrap(),
            &Tensor::from_vec(&[1, 1, d], v.clone()).unwrap(),
            &Tensor::scalar(0.1),
            &Tensor::scalar(eta),
            &Tensor::scalar(theta),
            &plain_layout(1, 1, 8),
            None,
        )
        .unwrap();
        let kq = dot(&k, &q);
        for i in 0..d {
            assert!((y.data()[i] - theta * kq * v[i]).abs() < 1e-14);
        }
    }
}

#[test]
fn titans_repeated_token_surprise_shrinks() {
    // For two identical tokens: s1 = v, s2 = (1 - θ) v, and
    // y2 = [keep·θ + θ·η + θ·(1 - θ)] (k·q) v.
    let d = 3;
    let q = vec![0.7, 0.1, -0.4];
    let k = unit(&[0.5, -1.0, 0.25]);
    let v = vec![1.0, -2.0, 0.5];
    let (alpha, eta, theta) = (0.2, 0.6, 0.45);
    let rep = |x: &[f64]| Tensor::from_vec(&[1, 2, d], [x, x].concat()).unwrap();
    let (y, fin) = titans_scan(
        &rep(&q),
        &rep(&k),
        &rep(&v),
        &Tensor::scalar(alpha),
        &Tensor::scalar(eta),
        &Tensor::scalar(theta),
        &plain_layout(1, 2, 8),
        None,
    )
    .unwrap();
    let kq = dot(&k, &q);
    let coef = (1.0 - alpha) * theta + theta * eta + theta * (1.0 - theta);
    for i in 0..d {
        assert!((y.data()[d + i] - coef * kq * v[i]).abs() < 1e-13);
    }
    // Second surprise recomputed from the memory after step one.
    let m1: Vec<f64> = (0..d * d).map(|ij| theta * v[ij / d] * k[ij % d]).collect();
    let s2: Vec<f64> = (0..d).map(|i| v[i] - dot(&m1[i * d..(i + 1) * d], &k)).collect();
    assert!(dot(&s2, &s2).sqrt() < dot(&v, &v).sqrt());
    assert!(fin.is_finite());
}

#[test]
fn titans_padding_is_read_only() {
    let mut rng = RngState::new(5).rng();
    let d = 4;
    let x = rand_tensor(&[1, 6, d], &mut rng, 1.0);
    let p = TitansParams::init(d, &mut rng);
    let mut valid = vec![true; 6];
    valid[4] = false;
    valid[5] = false;
    let masked = ScanLayout::new(1, 6, 2, false, Some(valid)).unwrap();
    let (y_full, fin_masked) = titans_forward(&x, &p, &masked, None).unwrap();
    let head = x.narrow(1, 0, 4).unwrap();
    let (y_head, fin_head) = titans_forward(&head, &p, &plain_layout(1, 4, 2), None).unwrap();
    assert_eq!(fin_masked, fin_head);
    assert_eq!(&y_full.to_vec()[..4 * d], &y_head.to_vec()[..]);
    // padded slots still read the memory
    assert!(y_full.to_vec()[4 * d..].iter().any(|v| *v != 0.0));
}

#[test]
fn titans_summary_slot_reads_final_memory() {
    let mut rng = RngState::new(8).rng();
    let d = 4;
    let x = rand_tensor(&[1, 6, d], &mut rng, 1.0);
    let p = TitansParams::init(d, &mut rng);
    let layout = ScanLayout::new(1, 6, 2, true, None).unwrap();
    let (y, fin) = titans_forward(&x, &p, &layout, None).unwrap();
    let q = x.matmul(&p.w_q).unwrap().to_vec();
    for i in 0..d {
        let want = dot(&fin.m[0][i * d..(i + 1) * d], &q[..d]);
        assert_eq!(y.data()[i], want);
    }
}

#[test]
fn titans_scan_gradients_match_finite_differences() {
    let mut rng = RngState::new(21).rng();
    let (b, t, d) = (2, 7, 4);
    let q = Tensor::param(&[b, t, d], rng.normal_vec(b * t * d, 1.0)).unwrap();
    let kraw = Tensor::param(&[b, t, d], rng.normal_vec(b * t * d, 1.0)).unwrap();
    let v = Tensor::param(&[b, t, d], rng.normal_vec(b * t * d, 1.0)).unwrap();
    let raws: Vec<Tensor> = [-0.5, 0.3, 0.2].iter().map(|&r| Tensor::param(&[], vec![r]).unwrap()).collect();
    let mut valid = vec![true; b * t];
    valid[t + 5] = false;
    valid[t + 6] = false;
    let layout = ScanLayout::new(b, t, 3, true, Some(valid)).unwrap();
    let r = rand_tensor(&[b, t, d], &mut rng, 1.0);
    let f = || {
        let k = kraw.l2_normalize_rows(KEY_NORM_EPS);
        let (y, _) = titans_scan(&q, &k, &v, &raws[0].sigmoid(), &raws[1].sigmoid(), &raws[2].sigmoid(), &layout, None)?;
        probe_loss(&y, &r)
    };
    let params = vec![
        ("q".to_string(), q.clone()),
        ("k".to_string(), kraw.clone()),
        ("v".to_string(), v.clone()),
        ("alpha".to_string(), raws[0].clone()),
        ("eta".to_string(), raws[1].clone()),
        ("theta".to_string(), raws[2].clone()),
    ];
    let rep = finite_diff_check(&f, &params, 1e-5, 1e-4, None).unwrap();
    assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
}

#[test]
fn cms_unit_decay_freezes_state() {
    let mut rng = RngState::new(2).rng();
    let d = 4;
    let x = rand_tensor(&[2, 9, d], &mut rng, 1.0);
    let mut p = CmsParams::init(d, &[0.5, 0.75], &mut rng).unwrap();
    for l in &mut p.levels {
        l.decay = 1.0;
    }
    let (y, fin) = cms_forward(&x, &p, &plain_layout(2, 9, 4), None).unwrap();
    assert!(y.to_vec().iter().all(|v| *v == 0.0));
    assert!(fin.levels.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn cms_zero_decay_holds_last_projected_mean() {
    let mut rng = RngState::new(3).rng();
    let d = 3;
    let x = rand_tensor(&[1, 4, d], &mut rng, 1.0);
    let mut p = CmsParams::init(d, &[0.5], &mut rng).unwrap();
    p.levels[0].decay = 0.0;
    let (y, fin) = cms_forward(&x, &p, &plain_layout(1, 4, 2), None).unwrap();
    let xv = x.to_vec();
    let w = p.levels[0].write.to_vec();
    let rd = p.levels[0].read.to_vec();
    let proj = |c: usize| -> Vec<f64> {
        let u: Vec<f64> = (0..d).map(|j| 0.5 * (xv[2 * c * d + j] + xv[(2 * c + 1) * d + j])).collect();
        (0..d).map(|j| (0..d).map(|i| u[i] * w[i * d + j]).sum()).collect()
    };
    let last = proj(1);
    for (a, b) in fin.levels[0].iter().zip(&last) {
        assert!((a - b).abs() < 1e-14);
    }
    // tokens of chunk 1 read chunk 0's projected mean through R with a half gate
    let m0 = proj(0);
    for t in 2..4 {
        for j in 0..d {
            let read: f64 = (0..d).map(|i| m0[i] * rd[i * d + j]).sum();
            assert!((y.data()[t * d + j] - 0.5 * read).abs() < 1e-14);
        }
    }
    assert!(y.to_vec()[..2 * d].iter().all(|v| *v == 0.0));
}

#[test]
fn cms_two_chunk_ema_by_hand() {
    // With W = I: m1 = 0.5·u1, m2 = 0.5·m1 + 0.5·u2 = 0.25·u1 + 0.5·u2.
    let d = 2;
    let x = Tensor::from_vec(&[1, 4, d], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap();
    let eye = Tensor::param(&[d, d], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let p = CmsParams {
        levels: vec![CmsLevel { read: eye.clone(), write: eye, gate: Tensor::param(&[d], vec![0.0; d]).unwrap(), decay: 0.5 }],
    };
    let (_, fin) = cms_forward(&x, &p, &plain_layout(1, 4, 2), None).unwrap();
    let (u1, u2) = ([2.0, 3.0], [2.0, 1.0]);
    for j in 0..d {
        assert!((fin.levels[0][j] - (0.25 * u1[j] + 0.5 * u2[j])).abs() < 1e-15);
    }
}

#[test]
fn cms_empty_chunks_skip_the_write() {
    let mut rng = RngState::new(4).rng();
    let d = 3;
    let x = rand_tensor(&[1, 6, d], &mut rng, 1.0);
    let p = CmsParams::init(d, &default_decays(4), &mut rng).unwrap();
    let mut valid = vec![true; 6];
    valid[4] = false;
    valid[5] = false;
    let masked = ScanLayout::new(1, 6, 2, false, Some(valid)).unwrap();
    let (_, fin_masked) = cms_forward(&x, &p, &masked, None).unwrap();
    let (_, fin_head) = cms_forward(&x.narrow(1, 0, 4).unwrap(), &p, &plain_layout(1, 4, 2), None).unwrap();
    assert_eq!(fin_masked, fin_head);
}

#[test]
fn cms_decay_schedule_is_checked() {
    assert_eq!(default_decays(4), vec![0.5, 0.75, 0.875, 0.9375]);
    assert!(check_decays(&[0.5, 0.5]).is_err());
    assert!(check_decays(&[0.9, 0.5]).is_err());
    assert!(check_decays(&[]).is_err());
    assert!(check_decays(&[0.5, 1.5]).is_err());
    assert!(CmsParams::init(4, &[0.75, 0.5], &mut RngState::new(0).rng()).is_err());
}

#[test]
fn cms_gradients_match_finite_differences() {
    let mut rng = RngState::new(31).rng();
    let (b, t, d) = (2, 8, 3);
    let x = Tensor::param(&[b, t, d], rng.normal_vec(b * t * d, 1.0)).unwrap();
    let p = CmsParams::init(d, &[0.5, 0.75], &mut rng).unwrap();
    for l in &p.levels {
        l.gate.update_data(|g| g.iter_mut().for_each(|v| *v = rng.normal()));
    }
    let mut valid = vec![true; b * t];
    valid[t + 6] = false;
    valid[t + 7] = false;
    let layout = ScanLayout::new(b, t, 3, true, Some(valid)).unwrap();
    let r = rand_tensor(&[b, t, d], &mut rng, 1.0);
    let f = || probe_loss(&cms_forward(&x, &p, &layout, None)?.0, &r);
    let mut params = vec![("x".to_string(), x.clone())];
    p.visit("cms", &mut params);
    let rep = finite_diff_check(&f, &params, 1e-5, 1e-4, None).unwrap();
    assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
}

fn random_block(d: usize, rng: &mut Rng) -> HopeBlockParams {
    let p = HopeBlockParams::init(d, 4, &default_decays(4), 0.0, rng).unwrap();
    // move every parameter off its symmetric init so no gradient vanishes by accident
    for (_, t) in p.parameters() {
        t.update_data(|v| v.iter_mut().for_each(|x| *x += 0.2 * rng.normal()));
    }
    p
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut rng = RngState::new(41).rng();
    let (b, t, d) = (2, 8, 16);
    let x = Tensor::param(&[b, t, d], rng.normal_vec(b * t * d, 1.0)).unwrap();
    let p = random_block(d, &mut rng);
    let mut valid = vec![true; b * t];
    valid[t + 7] = false;
    let layout = ScanLayout::new(b, t, 3, true, Some(valid)).unwrap();
    let r = rand_tensor(&[b, t, d], &mut rng, 1.0);
    let f = || {
        let mut drop_rng = RngState::new(0).rng();
        probe_loss(&hope_block(&x, &p, &layout, None, false, &mut drop_rng)?.0, &r)
    };
    let mut params = vec![("x".to_string(), x.clone())];
    params.extend(p.parameters());
    let rep = finite_diff_check(&f, &params, 1e-5, 1e-4, Some(48)).unwrap();
    assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
}

#[test]
fn block_small_gradient_check() {
    let mut rng = RngState::new(42).rng();
    let x = Tensor::param(&[1, 4, 8], rng.normal_vec(32, 1.0)).unwrap();
    let p = random_block(8, &mut rng);
    let layout = plain_layout(1, 4, 2);
    let r = rand_tensor(&[1, 4, 8], &mut rng, 1.0);
    let f = || probe_loss(&hope_block(&x, &p, &layout, None, false, &mut RngState::new(0).rng())?.0, &r);
    let mut params = vec![("x".to_string(), x.clone())];
    params.extend(p.parameters());
    let rep = finite_diff_check(&f, &params, 1e-5, 1e-4, None).unwrap();
    assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
}

#[test]
fn zero_weights_pass_input_through() {
    let mut rng = RngState::new(6).rng();
    let d = 8;
    let p = HopeBlockParams::init(d, 4, &default_decays(4), 0.1, &mut rng).unwrap();
    for (_, t) in p.parameters() {
        t.update_data(|v| v.iter_mut().for_each(|x| *x = 0.0));
    }
    let x = rand_tensor(&[2, 9, d], &mut rng, 1.0);
    let layout = ScanLayout::new(2, 9, 4, true, None).unwrap();
    let (y, _) = hope_block(&x, &p, &layout, None, true, &mut rng).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn silent_memories_reduce_to_feed_forward_stack() {
    let mut rng = RngState::new(7).rng();
    let d = 8;
    let mut blocks: Vec<HopeBlockParams> = (0..3).map(|_| random_block(d, &mut rng)).collect();
    for b in &mut blocks {
        b.titans.overrides.theta = Some(0.0);
        for l in &mut b.cms.levels {
            l.decay = 1.0;
        }
    }
    let x = rand_tensor(&[2, 9, d], &mut rng, 1.0);
    let layout = ScanLayout::new(2, 9, 4, true, None).unwrap();
    let mut h = x.clone();
    let mut reference = x;
    for b in &blocks {
        h = hope_block(&h, b, &layout, None, false, &mut rng).unwrap().0;
        reference = reference.add(&b.ffn.forward(&b.ln_ffn.forward(&reference).unwrap()).unwrap()).unwrap();
    }
    assert_eq!(h.to_vec(), reference.to_vec());
}

#[test]
fn forward_flops_are_linear_in_tokens() {
    let mut rng = RngState::new(9).rng();
    let d = 16;
    let p = HopeBlockParams::init(d, 4, &default_decays(4), 0.0, &mut rng).unwrap();
    let flops = |t: usize, rng: &mut Rng| {
        let x = rand_tensor(&[1, t, d], rng, 1.0);
        let layout = plain_layout(1, t, 8);
        reset_flop_count();
        hope_block(&x, &p, &layout, None, false, rng).unwrap();
        flop_count() as f64
    };
    for t in [32, 64, 128] {
        let ratio = flops(2 * t, &mut rng) / flops(t, &mut rng);
        assert!((1.9..=2.1).contains(&ratio), "T={t}: ratio {ratio}");
    }
}

#[test]
fn perturbing_a_token_leaves_earlier_outputs_unchanged() {
    let mut rng = RngState::new(10).rng();
    let (t_len, d) = (13, 8);
    let blocks: Vec<HopeBlockParams> = (0..2).map(|_| random_block(d, &mut rng)).collect();
    let layout = ScanLayout::new(1, t_len, 4, true, None).unwrap();
    let run = |x: &Tensor| {
        let mut h = x.clone();
        for b in &blocks {
            h = hope_block(&h, b, &layout, None, false, &mut RngState::new(0).rng()).unwrap().0;
        }
        h.to_vec()
    };
    for _ in 0..25 {
        let x = rand_tensor(&[1, t_len, d], &mut rng, 1.0);
        let t = 1 + rng.below(t_len - 1);
        let mut xv = x.to_vec();
        xv[t * d + rng.below(d)] += 1.0;
        let (a, b) = (run(&x), run(&Tensor::from_vec(&[1, t_len, d], xv).unwrap()));
        assert_eq!(a[d..t * d], b[d..t * d], "perturbed token {t}");
        assert_ne!(a[t * d..], b[t * d..]);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = RngState::new(11).rng();
    let d = 8;
    let p = HopeBlockParams::init(d, 4, &default_decays(4), 0.0, &mut rng).unwrap();
    let x = rand_tensor(&[2, 9, d], &mut rng, 1.0);
    let target = rand_tensor(&[2, 9, d], &mut rng, 1.0);
    let layout = ScanLayout::new(2, 9, 4, true, None).unwrap();
    let (y, _) = hope_block(&x, &p, &layout, None, false, &mut rng).unwrap();
    y.sub(&target).unwrap().square().mean_all().backward().unwrap();
    for (name, t) in p.parameters() {
        let g = t.grad().unwrap_or_default();
        assert!(g.iter().any(|v| *v != 0.0), "{name} has zero gradient");
    }
}

fn toy_patched(b: usize, n: usize, d: usize, rng: &mut Rng) -> PatchedBatch {
    let p = 4;
    let values = rng.normal_vec(b * n * p, 1.0);
    let batch = crate::preprocess::SeriesBatch::from_lengths(b, n * p, values, vec![n * p; b], None).unwrap();
    let emb = PatchEmbedding::init(p, n, d, rng);
    let revin = crate::preprocess::RevinAffine::new();
    crate::preprocess::tokenize(&batch, &revin, &emb, p, 1e-5, None).unwrap()
}

#[test]
fn encode_depth_zero_is_identity_and_depth_is_checked() {
    let mut rng = RngState::new(12).rng();
    let pb = toy_patched(2, 8, 8, &mut rng);
    let out = encode(&pb, &[], 4, 0, false, &mut rng).unwrap();
    assert_eq!(out.h.to_vec(), pb.tokens.to_vec());
    assert_eq!(out.h_cls.shape(), &[2, 8]);
    let block = HopeBlockParams::init(8, 4, &default_decays(4), 0.0, &mut rng).unwrap();
    assert!(encode(&pb, &[block], 4, 5, false, &mut rng).is_err());
}

#[test]
fn encode_is_deterministic_in_eval_mode() {
    let mut rng = RngState::new(13).rng();
    let pb = toy_patched(2, 8, 8, &mut rng);
    let blocks: Vec<HopeBlockParams> = (0..2)
        .map(|_| HopeBlockParams::init(8, 4, &default_decays(4), 0.1, &mut rng).unwrap())
        .collect();
    let a = encode(&pb, &blocks, 4, 2, false, &mut RngState::new(1).rng()).unwrap();
    let b = encode(&pb, &blocks, 4, 2, false, &mut RngState::new(2).rng()).unwrap();
    assert_eq!(a.h.to_vec(), b.h.to_vec());
    assert_eq!(a.h_cls.to_vec(), a.h.narrow(1, 0, 1).unwrap().to_vec());
    assert!(a.h.all_finite());
}
