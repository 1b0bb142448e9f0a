use irrcast::autodiff::{param_gradient_check, Optimizer, ParamStore, Tape, Tensor, Var};
use irrcast::data::{drop_random, make_windows, synth_generate, IrregularSeries, SynthKind, SynthParams, WindowPair};
use irrcast::model::{
    causal_mask, cross_attention, decoder_forward, encoder_forward, evaluate, load_checkpoint, masked_mae, masked_mse,
    mse_loss, ncde_pe_train_single_epoch, save_checkpoint, self_attention, train, DecoderLayer, EarlyStopping,
    EncoderLayer, FeedForward, ForecastBatch, Forecaster, LayerNorm, Linear, ModelConfig, MultiHeadAttention,
    StopDecision, TokenEmbedding, TrainConfig,
};
use irrcast::pe::{PeMethod, PeMethodConfig};
use irrcast::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 8;
const M: usize = 4;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed random weights, a well-scaled scalar probe.
fn probe_loss(tape: &mut Tape, out: Var, seed: u64) -> irrcast::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(tape.shape(out), &mut rng));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn assert_grads(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> irrcast::Result<Var>, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let checks = param_gradient_check(store, f, 24, 1e-6, &mut rng).unwrap();
    assert!(checks.len() >= 20);
    for c in &checks {
        assert!(c.relative_error < tol, "{} [{}]: {} vs {}", c.param, c.index, c.analytic, c.numeric);
    }
}

fn small_config(pe: Option<PeMethod>) -> ModelConfig {
    let d = 8;
    ModelConfig {
        d_model: d,
        n_heads: 2,
        encoder_depth: 1,
        decoder_depth: 1,
        feedforward_width: 16,
        label_len: N / 2,
        dropout_rate: 0.0,
        pe: pe.map(|m| PeMethodConfig::with_defaults(m, d, 4 * (N + M), 3600.0, 1.0 / 3600.0)),
        ncde: Default::default(),
    }
}

fn series(kind: SynthKind, len: usize, rate: f64, seed: u64) -> IrregularSeries {
    let s = synth_generate(kind, &SynthParams::default(), len, seed).unwrap();
    drop_random(&s, rate, seed).unwrap()
}

fn windows(rate: f64, seed: u64) -> Vec<WindowPair> {
    make_windows(&series(SynthKind::SineMixture, 120, rate, seed), N, M, 3).unwrap()
}

fn batch_of(ws: &[WindowPair], label_len: usize) -> ForecastBatch {
    let refs: Vec<&WindowPair> = ws.iter().collect();
    ForecastBatch::from_windows(&refs, label_len).unwrap()
}

// ---- layers ----

#[test]
fn token_embedding_is_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let tok = TokenEmbedding::new(&mut store, 2, 6, &mut rng);
    let x = rand_tensor(&[1, 5, 4], &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let px: Vec<f64> = perm.iter().flat_map(|&p| x.data()[p * 4..(p + 1) * 4].to_vec()).collect();
    let mut t = Tape::new();
    let a = t.constant(x.clone());
    let a = tok.forward(&mut t, &store, a).unwrap();
    let b = t.constant(Tensor::from_vec(&[1, 5, 4], px).unwrap());
    let b = tok.forward(&mut t, &store, b).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(&t.value(b).data()[i * 6..(i + 1) * 6], &t.value(a).data()[p * 6..(p + 1) * 6]);
    }
    let z = t.constant(Tensor::zeros(&[1, 5, 4]).unwrap());
    let z = tok.forward(&mut t, &store, z).unwrap();
    assert!(t.value(z).data().iter().all(|&v| v == 0.0));
    let bad = t.constant(Tensor::zeros(&[1, 5, 3]).unwrap());
    assert!(matches!(tok.forward(&mut t, &store, bad), Err(Error::ShapeMismatch(_))));
}

#[test]
fn token_input_zero_fills_and_appends_indicators() {
    let v = irrcast::model::token_input(&[1.0, 9.0, 3.0, 4.0], &[true, false, true, true], 2);
    assert_eq!(v, vec![1.0, 0.0, 1.0, 0.0, 3.0, 4.0, 1.0, 1.0]);
}

#[test]
fn attention_weights_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
    let mut t = Tape::new();
    let q = t.constant(rand_tensor(&[2, 5, 8], &mut rng));
    let m = t.constant(rand_tensor(&[2, 7, 8], &mut rng));
    let (w, out) = attn.forward_with_weights(&mut t, &store, q, m, None).unwrap();
    assert_eq!(t.shape(out), &[2, 5, 8]);
    for row in t.value(w).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mask = causal_mask(5);
    let (w, _) = attn.forward_with_weights(&mut t, &store, q, q, Some(&mask)).unwrap();
    for (k, row) in t.value(w).data().chunks(5).enumerate() {
        let i = k % 5;
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[i + 1..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn attention_heads_must_divide_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    assert!(matches!(MultiHeadAttention::new(&mut store, "a", 8, 3, &mut rng), Err(Error::InvalidConfig(_))));
}

/// Output projection of the value projection of `x`, computed by hand.
fn value_path(t: &mut Tape, store: &ParamStore, attn: &MultiHeadAttention, x: Var) -> Var {
    let v = attn.v.forward(t, store, x).unwrap();
    attn.out.forward(t, store, v).unwrap()
}

#[test]
fn single_key_attention_returns_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 8, 4, &mut rng).unwrap();
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[3, 1, 8], &mut rng));
    let out = self_attention(&mut t, &store, &attn, x, false).unwrap();
    let expect = value_path(&mut t, &store, &attn, x);
    assert!(t.value(out).max_abs_diff(t.value(expect)).unwrap() < 1e-12);

    let q = t.constant(rand_tensor(&[3, 6, 8], &mut rng));
    let out = cross_attention(&mut t, &store, &attn, q, x).unwrap();
    let v = t.value(expect).clone();
    for b in 0..3 {
        for j in 0..6 {
            let got = &t.value(out).data()[(b * 6 + j) * 8..(b * 6 + j + 1) * 8];
            for (g, e) in got.iter().zip(&v.data()[b * 8..(b + 1) * 8]) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn feed_forward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let ff = FeedForward::new(&mut store, "ff", 6, 10, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    let mut zeroed = store.clone();
    for id in ids {
        let shape = zeroed.value(id).shape().to_vec();
        zeroed.set_value(id, Tensor::zeros(&shape).unwrap()).unwrap();
    }
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[2, 4, 6], &mut rng));
    let y = ff.forward(&mut t, &zeroed, x).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[2, 5, 8], &mut rng);
    let mem = rand_tensor(&[2, 3, 8], &mut rng);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 8, 5, &mut rng);
    assert_grads(&mut store, |t, s| {
        let x = t.constant(x.clone());
        let y = lin.forward(t, s, x)?;
        probe_loss(t, y, 1)
    }, 1e-4);

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 16);
    let wide = rand_tensor(&[2, 5, 16], &mut rng);
    let mut vals = store.clone();
    for id in vals.ids().collect::<Vec<_>>() {
        let shape = vals.value(id).shape().to_vec();
        vals.set_value(id, rand_tensor(&shape, &mut rng)).unwrap();
    }
    store = vals;
    assert_grads(&mut store, |t, s| {
        let x = t.constant(wide.clone());
        let y = ln.forward(t, s, x)?;
        probe_loss(t, y, 2)
    }, 1e-4);

    let mut store = ParamStore::new();
    let tok = TokenEmbedding::new(&mut store, 4, 6, &mut rng);
    assert_grads(&mut store, |t, s| {
        let x = t.constant(x.clone());
        let y = tok.forward(t, s, x)?;
        probe_loss(t, y, 3)
    }, 1e-4);

    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
    assert_grads(&mut store, |t, s| {
        let x = t.constant(x.clone());
        let y = self_attention(t, s, &attn, x, true)?;
        probe_loss(t, y, 4)
    }, 1e-4);
    assert_grads(&mut store, |t, s| {
        let x = t.constant(x.clone());
        let m = t.constant(mem.clone());
        let y = cross_attention(t, s, &attn, x, m)?;
        probe_loss(t, y, 5)
    }, 1e-4);

    let mut store = ParamStore::new();
    let ff = FeedForward::new(&mut store, "ff", 8, 12, &mut rng);
    assert_grads(&mut store, |t, s| {
        let x = t.constant(x.clone());
        let y = ff.forward(t, s, x)?;
        probe_loss(t, y, 6)
    }, 1e-4);

    let mut store = ParamStore::new();
    let enc = vec![EncoderLayer::new(&mut store, "e", 8, 2, 12, &mut rng).unwrap()];
    let dec = vec![DecoderLayer::new(&mut store, "d", 8, 2, 12, &mut rng).unwrap()];
    assert_grads(&mut store, |t, s| {
        let xv = t.constant(x.clone());
        let memory = encoder_forward(t, s, &enc, xv, 0.0)?;
        let y = decoder_forward(t, s, &dec, xv, memory, 0.0)?;
        probe_loss(t, y, 7)
    }, 1e-4);
}

#[test]
fn depth_zero_stacks_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = ParamStore::new();
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&[2, 4, 8], &mut rng));
    let m = t.constant(rand_tensor(&[2, 3, 8], &mut rng));
    let e = encoder_forward(&mut t, &store, &[], x, 0.0).unwrap();
    let d = decoder_forward(&mut t, &store, &[], x, m, 0.0).unwrap();
    assert_eq!(t.value(e), t.value(x));
    assert_eq!(t.value(d), t.value(x));
}

#[test]
fn encoder_fits_constant_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let enc = vec![EncoderLayer::new(&mut store, "e", 8, 2, 16, &mut rng).unwrap()];
    let head = Linear::new(&mut store, "head", 8, 1, &mut rng);
    let x = rand_tensor(&[4, 6, 8], &mut rng);
    let target = Tensor::full(&[4, 6, 1], 0.7).unwrap();
    let mask = vec![true; 24];
    let mut opt = Optimizer::adam(1e-2);
    let mut losses = vec![];
    for _ in 0..200 {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let h = encoder_forward(&mut t, &store, &enc, xv, 0.0).unwrap();
        let y = head.forward(&mut t, &store, h).unwrap();
        let loss = mse_loss(&mut t, y, &target, &mask).unwrap();
        losses.push(t.value(loss).data()[0]);
        t.backward_into(loss, &mut store).unwrap();
        opt.step(&mut store).unwrap();
    }
    assert!(losses[199] < 0.1 * losses[0], "{} -> {}", losses[0], losses[199]);
}

#[test]
fn decoder_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let dec: Vec<DecoderLayer> =
        (0..2).map(|i| DecoderLayer::new(&mut store, &format!("d{i}"), 8, 2, 16, &mut rng).unwrap()).collect();
    let x = rand_tensor(&[2, 6, 8], &mut rng);
    let mem = rand_tensor(&[2, 4, 8], &mut rng);
    for j in 0..5 {
        let mut x2 = x.clone();
        for b in 0..2 {
            for i in j + 1..6 {
                for k in 0..8 {
                    x2.data_mut()[(b * 6 + i) * 8 + k] = 0.0;
                }
            }
        }
        let mut t = Tape::new();
        let m = t.constant(mem.clone());
        let a = t.constant(x.clone());
        let a = decoder_forward(&mut t, &store, &dec, a, m, 0.0).unwrap();
        let b = t.constant(x2);
        let b = decoder_forward(&mut t, &store, &dec, b, m, 0.0).unwrap();
        for bi in 0..2 {
            for i in 0..=j {
                for k in 0..8 {
                    let idx = (bi * 6 + i) * 8 + k;
                    assert!((t.value(a).data()[idx] - t.value(b).data()[idx]).abs() < 1e-10);
                }
            }
        }
    }
}

// ---- forecaster ----

#[test]
fn untrained_forecast_has_horizon_shape() {
    let ws = windows(0.4, 0);
    for pe in [None, Some(PeMethod::Ctlpe), Some(PeMethod::SimpleOverlap), Some(PeMethod::IrrSinusoidal), Some(PeMethod::Ncde)] {
        let model = Forecaster::new(small_config(pe), 3, N, 0).unwrap();
        let b = batch_of(&ws[..5], N / 2);
        let out = model.forecast(&b).unwrap();
        assert_eq!(out.shape(), &[5, M, 3]);
        assert!(out.is_finite());
    }
}

#[test]
fn config_validation() {
    let mut c = small_config(Some(PeMethod::Ctlpe));
    c.label_len = N + 1;
    assert!(matches!(Forecaster::new(c, 3, N, 0), Err(Error::InvalidConfig(_))));
    let mut c = small_config(Some(PeMethod::Ctlpe));
    c.n_heads = 3;
    assert!(matches!(Forecaster::new(c, 3, N, 0), Err(Error::InvalidConfig(_))));
    let mut c = small_config(Some(PeMethod::Ctlpe));
    c.dropout_rate = 1.0;
    assert!(matches!(Forecaster::new(c, 3, N, 0), Err(Error::InvalidConfig(_))));
}

fn permuted(batch: &ForecastBatch, perm: &[usize]) -> ForecastBatch {
    let mut out = batch.clone();
    let l = batch.n_vars;
    for b in 0..batch.batch {
        for (i, &p) in perm.iter().enumerate() {
            let (dst, src) = ((b * N + i) * l, (b * N + p) * l);
            out.enc_values[dst..dst + l].copy_from_slice(&batch.enc_values[src..src + l]);
            out.enc_mask[dst..dst + l].copy_from_slice(&batch.enc_mask[src..src + l]);
        }
    }
    out
}

/// Largest deviation between the encoding of permuted values and the
/// permuted encoding.
fn permutation_deviation(model: &Forecaster, batch: &ForecastBatch, perm: &[usize]) -> f64 {
    let d = model.config.d_model;
    let mut t = Tape::new();
    let a = model.encode(&mut t, batch).unwrap();
    let b = model.encode(&mut t, &permuted(batch, perm)).unwrap();
    let (a, b) = (t.value(a).data(), t.value(b).data());
    let mut worst: f64 = 0.0;
    for w in 0..batch.batch {
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..d {
                worst = worst.max((b[(w * N + i) * d + k] - a[(w * N + p) * d + k]).abs());
            }
        }
    }
    worst
}

#[test]
fn encoder_permutation_equivariance_breaks_with_ctlpe() {
    let ws = windows(0.4, 1);
    let batch = batch_of(&ws[..6], N / 2);
    let perm = [5, 2, 7, 0, 1, 6, 3, 4];
    let plain = Forecaster::new(small_config(None), 3, N, 1).unwrap();
    assert!(permutation_deviation(&plain, &batch, &perm) < 1e-10);
    let ctlpe = Forecaster::new(small_config(Some(PeMethod::Ctlpe)), 3, N, 1).unwrap();
    assert!(permutation_deviation(&ctlpe, &batch, &perm) > 1e-3);
}

#[test]
fn timestamps_matter_for_ctlpe_but_not_simple_overlap() {
    let ws = windows(0.0, 2);
    let a = batch_of(&ws[..4], N / 2);
    let mut b = a.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let len = N + M;
    for w in 0..4 {
        let mut times: Vec<f64> = (0..len - 2).map(|_| rng.gen_range(0.01..0.99)).collect();
        times.extend([0.0, 1.0]);
        times.sort_by(f64::total_cmp);
        for (i, &t) in times.iter().enumerate() {
            b.pe_input.relative_time[w * len + i] = t;
            b.pe_input.elapsed_seconds[w * len + i] = t * 3600.0 * (len - 1) as f64;
        }
    }
    let ctlpe = Forecaster::new(small_config(Some(PeMethod::Ctlpe)), 3, N, 3).unwrap();
    let d = ctlpe.forecast(&a).unwrap().max_abs_diff(&ctlpe.forecast(&b).unwrap()).unwrap();
    assert!(d > 1e-6, "{d}");
    let overlap = Forecaster::new(small_config(Some(PeMethod::SimpleOverlap)), 3, N, 3).unwrap();
    assert_eq!(overlap.forecast(&a).unwrap(), overlap.forecast(&b).unwrap());
}

#[test]
fn revin_makes_forecasts_affine_equivariant() {
    let ws = windows(0.2, 4);
    let batch = batch_of(&ws[..5], N / 2);
    let model = Forecaster::new(small_config(Some(PeMethod::Ctlpe)), 3, N, 4).unwrap();
    let base = model.forecast(&batch).unwrap();
    for (scale, shift) in [(3.0, -2.0), (0.25, 10.0), (40.0, 0.5)] {
        let mut moved = batch.clone();
        for v in moved.enc_values.iter_mut().chain(moved.dec_values.iter_mut()) {
            *v = scale * *v + shift;
        }
        for (k, v) in moved.dec_values.iter_mut().enumerate() {
            if !moved.dec_mask[k] {
                *v = 0.0;
            }
        }
        let out = model.forecast(&moved).unwrap();
        for (o, b) in out.data().iter().zip(base.data()) {
            assert!((o - (scale * b + shift)).abs() < 1e-5, "{o} vs {}", scale * b + shift);
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let ws = windows(0.4, 5);
    let batch = batch_of(&ws[..3], N / 2);
    let target = Tensor::from_slice(&[3, M, 3], &batch.target).unwrap();
    for pe in [Some(PeMethod::Ctlpe), Some(PeMethod::Ncde)] {
        let model = Forecaster::new(small_config(pe), 3, N, 5).unwrap();
        let mut store = model.store.clone();
        assert_grads(&mut store, |t, s| {
            let p = model.forward_with(t, s, &batch)?;
            mse_loss(t, p, &target, &batch.target_mask)
        }, 1e-4);
    }
}

#[test]
fn ctlpe_receives_gradient_end_to_end() {
    let ws = windows(0.4, 6);
    let batch = batch_of(&ws[..6], N / 2);
    let mut model = Forecaster::new(small_config(Some(PeMethod::Ctlpe)), 3, N, 6).unwrap();
    let target = Tensor::from_slice(&[6, M, 3], &batch.target).unwrap();
    let mut t = Tape::new();
    let p = model.forward(&mut t, &batch).unwrap();
    let loss = mse_loss(&mut t, p, &target, &batch.target_mask).unwrap();
    t.backward_into(loss, &mut model.store).unwrap();
    let ids = model.pe_param_ids();
    assert_eq!(ids.len(), 2);
    for id in ids {
        assert!(model.store.grad(id).unwrap().norm() > 0.0, "{}", model.store.get(id).name);
    }
}

// ---- loss and evaluation ----

#[test]
fn mse_loss_fixtures() {
    let target = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut t = Tape::new();
    let p = t.leaf(target.clone(), true);
    let l = mse_loss(&mut t, p, &target, &[true; 4]).unwrap();
    assert_eq!(t.value(l).data()[0], 0.0);
    let shifted = Tensor::from_vec(&[1, 2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
    let p = t.leaf(shifted, true);
    let l = mse_loss(&mut t, p, &target, &[true; 4]).unwrap();
    assert_eq!(t.value(l).data()[0], 1.0);
    let pred = Tensor::from_vec(&[1, 2, 2], vec![3.0, 100.0, 3.0, -50.0]).unwrap();
    let p = t.leaf(pred, true);
    let l = mse_loss(&mut t, p, &target, &[true, false, true, false]).unwrap();
    assert_eq!(t.value(l).data()[0], 2.0);
    assert!(matches!(mse_loss(&mut t, p, &target, &[false; 4]), Err(Error::EmptyMask)));
    assert_eq!(masked_mse(&[3.0, 100.0, 3.0], &[1.0, 2.0, 3.0], &[true, false, true]).unwrap(), 2.0);
    assert_eq!(masked_mae(&[3.0, 100.0, 3.0], &[1.0, 2.0, 3.0], &[true, false, true]).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn masked_mae_squared_is_at_most_mse(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, any::<bool>()), 1..40)
    ) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let mut mask: Vec<bool> = pairs.iter().map(|p| p.2).collect();
        mask[0] = true;
        let mse = masked_mse(&pred, &target, &mask).unwrap();
        let mae = masked_mae(&pred, &target, &mask).unwrap();
        prop_assert!(mse >= 0.0 && mae >= 0.0);
        prop_assert!(mae * mae <= mse + 1e-9);
    }
}

#[test]
fn evaluate_examples() {
    let model = Forecaster::new(small_config(Some(PeMethod::Ctlpe)), 3, N, 7).unwrap();
    assert!(matches!(evaluate(&model, &[], 4), Err(Error::EmptyDataset)));
    let (mse, mae) = evaluate(&model, &windows(0.2, 7), 4).unwrap();
    assert!(mse.is_finite() && mae * mae <= mse + 1e-9);
}

// ---- training ----

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let mut model = Forecaster::new(small_config(Some(PeMethod::Ncde)), 3, N, 8).unwrap();
    let before = model.store.snapshot();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let log = train(&mut model, &windows(0.2, 8), &[], &cfg).unwrap();
    assert!(log.epochs.is_empty() && log.ncde.is_none());
    assert_eq!(model.store.snapshot(), before);
}

#[test]
fn early_stopping_on_crafted_schedule() {
    let mut s = EarlyStopping::new(3);
    let schedule = [1.0, 0.8, 0.9, 0.85, 0.7, 0.75, 0.8, 0.9, 0.6];
    let decisions: Vec<StopDecision> = schedule[..8].iter().map(|&v| s.observe(v)).collect();
    use StopDecision::*;
    assert_eq!(decisions[..8], [Improved, Improved, Continue, Continue, Improved, Continue, Continue, Stop]);
    assert_eq!(s.best(), 0.7);
}

#[test]
fn constant_series_is_forecast_closely() {
    let base = synth_generate(SynthKind::SineMixture, &SynthParams::default(), 80, 0).unwrap();
    let constant = base.map_values(|v, _| 2.5 + v as f64);
    let ws = make_windows(&drop_random(&constant, 0.2, 0).unwrap(), N, M, 2).unwrap();
    let mut model = Forecaster::new(small_config(Some(PeMethod::Ctlpe)), 3, N, 9).unwrap();
    let mut opt = Optimizer::adam(1e-2);
    let batch = batch_of(&ws, N / 2);
    let target = Tensor::from_slice(&[batch.batch, M, 3], &batch.target).unwrap();
    for _ in 0..300 {
        let mut t = Tape::new();
        let p = model.forward(&mut t, &batch).unwrap();
        let loss = mse_loss(&mut t, p, &target, &batch.target_mask).unwrap();
        t.backward_into(loss, &mut model.store).unwrap();
        opt.step(&mut model.store).unwrap();
    }
    let (mse, _) = evaluate(&model, &ws, 16).unwrap();
    assert!(mse < 0.05, "{mse}");
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let s = series(SynthKind::SineMixture, 300, 0.2, 10);
    let ws = make_windows(&s, N, M, 2).unwrap();
    let (tr, va) = ws.split_at(100);
    let cfg = TrainConfig { epochs: 5, batch_size: 16, learning_rate: 3e-3, patience: 5, seed: 10 };
    let run = || {
        let mut model = Forecaster::new(small_config(Some(PeMethod::Ctlpe)), 3, N, 10).unwrap();
        let log = train(&mut model, tr, va, &cfg).unwrap();
        (log, model.store.snapshot())
    };
    let (log, params) = run();
    let losses: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 5);
    let smoothed: Vec<f64> = losses.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    let (log2, params2) = run();
    assert_eq!(log, log2);
    assert_eq!(params, params2);
}

#[test]
fn single_epoch_ncde_freezes_into_a_table() {
    let ws = windows(0.4, 11);
    let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
    let mut model = Forecaster::new(small_config(Some(PeMethod::Ncde)), 3, N, 11).unwrap();
    let mut opt = Optimizer::adam(1e-3);
    let before = model.store.snapshot();
    let log = ncde_pe_train_single_epoch(&mut model, &ws, &mut opt, &cfg).unwrap();
    assert!(log.batches > 0 && log.batches_with_field_grad >= 1);
    assert!(log.first_batch_loss.is_some() && log.last_batch_loss.is_some());
    assert!(model.ncde().unwrap().table().is_some());
    let ids = model.pe_param_ids();
    assert!(ids.iter().all(|&id| !model.store.get(id).trainable));
    assert!(ids.iter().any(|&id| model.store.value(id) != &before[id.index()]));

    let mut fresh = Forecaster::new(small_config(Some(PeMethod::Ncde)), 3, N, 11).unwrap();
    let before = fresh.store.snapshot();
    let log = ncde_pe_train_single_epoch(&mut fresh, &[], &mut opt, &cfg).unwrap();
    assert_eq!(log.batches, 0);
    assert_eq!(fresh.store.snapshot(), before);
}

#[test]
fn training_with_single_epoch_ncde_logs_the_pass() {
    let ws = windows(0.4, 12);
    let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
    let mut model = Forecaster::new(small_config(Some(PeMethod::Ncde)), 3, N, 12).unwrap();
    let log = train(&mut model, &ws, &ws[..4], &cfg).unwrap();
    assert!(log.ncde.is_some());
    assert_eq!(log.epochs.len(), 2);
    assert!(model.ncde().unwrap().table().is_some());
}

// ---- checkpoint ----

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ws = windows(0.2, 13);
    let batch = batch_of(&ws[..4], N / 2);
    for pe in [Some(PeMethod::Ctlpe), Some(PeMethod::Ncde), Some(PeMethod::Simple)] {
        let mut model = Forecaster::new(small_config(pe), 3, N, 13).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        train(&mut model, &ws, &[], &cfg).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.store.snapshot(), model.store.snapshot());
        assert_eq!(loaded.forecast(&batch).unwrap(), model.forecast(&batch).unwrap());
    }
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, "not a checkpoint\n").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
}
