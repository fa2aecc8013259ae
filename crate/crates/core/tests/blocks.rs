use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sma_core::nn::{ConvLstm, ConvLstmCell, ConvLstmConfig, Ctx, Initializer, Mode, MsdaBlock, MsdaConfig, ParamId, ParamStore, SeGate, BN_EPSILON};
use sma_core::reference;
use sma_core::{Tape, Tensor};

fn set(store: &mut ParamStore<f64>, id: ParamId, values: &[f64]) {
    let t = store.tensor_mut(id);
    assert_eq!(t.numel(), values.len(), "{:?}", t.dims());
    t.data_mut().copy_from_slice(values);
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
}

#[test]
fn se_gate_matches_scalar_chain() {
    let mut store = ParamStore::<f64>::new();
    let se = SeGate::new(&mut store, &mut Initializer::new(0), "se", 2, 1).unwrap();
    let (w1, b1, w2, b2) = ([0.5, -1.0, 2.0, 0.25], [0.1, -0.2], [1.0, -0.5, 0.3, 0.7], [0.0, 0.4]);
    set(&mut store, se.fc1.weight, &w1);
    set(&mut store, se.fc1.bias, &b1);
    set(&mut store, se.fc2.weight, &w2);
    set(&mut store, se.fc2.bias, &b2);

    // Constant channels 1.5 and -0.5 on a 3x3 plane.
    let u = Tensor::from_fn(&[1, 2, 3, 3], |i| if i < 9 { 1.5 } else { -0.5 }).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let uv = ctx.tape.constant(u.clone());
    let y = se.forward(&mut ctx, uv).unwrap();

    let g = [1.5, -0.5];
    let h: Vec<f64> = reference::linear(&g, 1, 2, &w1, 2, &b1).into_iter().map(reference::relu).collect();
    let s: Vec<f64> = reference::linear(&h, 1, 2, &w2, 2, &b2).into_iter().map(reference::sigmoid).collect();
    let out = tape.value(y).unwrap();
    for (i, v) in out.data().iter().enumerate() {
        let want = u.data()[i] * s[i / 9];
        assert!((v - want).abs() < 1e-12, "{i}: {v} vs {want}");
    }
}

#[test]
fn se_zero_params_halve_and_saturated_bias_passes_through() {
    let mut store = ParamStore::<f64>::new();
    let se = SeGate::new(&mut store, &mut Initializer::new(0), "se", 4, 2).unwrap();
    store.fill(0.0);
    let u = random(&mut ChaCha8Rng::seed_from_u64(1), &[2, 4, 3, 3]);
    let run = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Eval);
        let uv = ctx.tape.constant(u.clone());
        let y = se.forward(&mut ctx, uv).unwrap();
        tape.value(y).unwrap().clone()
    };
    for (a, b) in run(&store).data().iter().zip(u.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
    set(&mut store, se.fc2.bias, &[20.0; 4]);
    for (a, b) in run(&store).data().iter().zip(u.data()) {
        assert!((a - b).abs() < 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn se_scales_lie_strictly_inside_unit_interval() {
    let mut store = ParamStore::<f64>::new();
    let se = SeGate::new(&mut store, &mut Initializer::new(3), "se", 8, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = Tensor::from_fn(&[3, 8, 4, 4], |_| rng.random_range(-5.0..5.0)).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let uv = ctx.tape.constant(u);
    let s = se.scales(&mut ctx, uv).unwrap();
    let s = tape.value(s).unwrap();
    assert_eq!(s.dims(), &[3, 8]);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

/// Eval-mode batch norm with default running statistics divides by this.
fn bn_identity_scale() -> f64 {
    1.0 / (1.0 + BN_EPSILON).sqrt()
}

#[test]
fn msda_block_matches_oracle_composition() {
    let mut store = ParamStore::<f64>::new();
    let block = MsdaBlock::new(&mut store, &mut Initializer::new(0), "msda", MsdaConfig::new(1, 2, 1)).unwrap();
    let pw = [0.8, -0.6];
    set(&mut store, block.pointwise.conv.weight, &pw);
    let kernels: Vec<Vec<f64>> = (0..3)
        .map(|b| (0..18).map(|i| ((i * 7 + b * 5) % 11) as f64 * 0.05 - 0.2).collect())
        .collect();
    for (branch, k) in block.branches.iter().zip(&kernels) {
        set(&mut store, branch.conv.weight, k);
    }
    let (w1, b1, w2, b2) = ([0.3, -0.4, 0.2, 0.5], [0.05, 0.0], [0.6, -0.1, -0.3, 0.9], [0.1, -0.1]);
    set(&mut store, block.se.fc1.weight, &w1);
    set(&mut store, block.se.fc1.bias, &b1);
    set(&mut store, block.se.fc2.weight, &w2);
    set(&mut store, block.se.fc2.bias, &b2);

    let input: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let xv = ctx.tape.constant(Tensor::new(&[1, 1, 4, 4], input.clone()).unwrap());
    let y = block.forward(&mut ctx, xv).unwrap();
    let got = tape.value(y).unwrap().data().to_vec();

    let bn_relu = |v: Vec<f64>| v.into_iter().map(|a| reference::relu(a * bn_identity_scale())).collect::<Vec<_>>();
    let (x, _, _) = reference::conv2d(&input, (1, 1, 4, 4), &pw, (2, 1), None, 1, 0, 1, 1);
    let x = bn_relu(x);
    let branch = |inp: &[f64], b: usize| {
        let d = b + 1;
        bn_relu(reference::conv2d(inp, (1, 2, 4, 4), &kernels[b], (2, 3), None, 1, d, d, 2).0)
    };
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p + q).collect::<Vec<_>>();
    let y1 = branch(&x, 0);
    let y2 = branch(&add(&x, &y1), 1);
    let y3 = branch(&add(&x, &y2), 2);
    let u = add(&add(&y1, &y2), &y3);
    let g = reference::global_avg_pool(&u, 1, 2, 16);
    let h: Vec<f64> = reference::linear(&g, 1, 2, &w1, 2, &b1).into_iter().map(reference::relu).collect();
    let s: Vec<f64> = reference::linear(&h, 1, 2, &w2, 2, &b2).into_iter().map(reference::sigmoid).collect();
    for i in 0..32 {
        let want = u[i] * s[i / 16];
        assert!((got[i] - want).abs() < 1e-12, "{i}: {} vs {want}", got[i]);
    }
}

#[test]
fn msda_zero_weights_give_zero_and_preserve_size() {
    let mut store = ParamStore::<f64>::new();
    let block = MsdaBlock::new(&mut store, &mut Initializer::new(1), "msda", MsdaConfig::new(3, 4, 2)).unwrap();
    let x = random(&mut ChaCha8Rng::seed_from_u64(2), &[2, 3, 7, 5]);
    let run = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, Mode::Train);
        let xv = ctx.tape.constant(x.clone());
        let y = block.forward(&mut ctx, xv).unwrap();
        tape.value(y).unwrap().clone()
    };
    assert_eq!(run(&store).dims(), &[2, 4, 7, 5]);
    for id in [block.pointwise.conv.weight, block.se.fc1.weight, block.se.fc2.weight] {
        store.tensor_mut(id).data_mut().fill(0.0);
    }
    for b in &block.branches {
        store.tensor_mut(b.conv.weight).data_mut().fill(0.0);
    }
    assert!(run(&store).data().iter().all(|&v| v == 0.0));
}

#[test]
fn msda_second_branch_sees_input_plus_first() {
    // One channel, no SE influence on the check: read the branch outputs directly.
    let mut store = ParamStore::<f64>::new();
    let block = MsdaBlock::new(&mut store, &mut Initializer::new(0), "msda", MsdaConfig::new(1, 1, 1)).unwrap();
    let k1: Vec<f64> = (0..9).map(|i| if i == 4 { 0.5 } else { 0.1 }).collect();
    let k2: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.05 + 0.2).collect();
    set(&mut store, block.branches[0].conv.weight, &k1);
    set(&mut store, block.branches[1].conv.weight, &k2);
    let x: Vec<f64> = (0..16).map(|i| 0.1 + (i % 5) as f64 * 0.2).collect();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let xv = ctx.tape.constant(Tensor::new(&[1, 1, 4, 4], x.clone()).unwrap());
    let [_, y2, _] = block.separable_branches(&mut ctx, xv).unwrap();
    let got = tape.value(y2).unwrap().data().to_vec();

    let s = bn_identity_scale();
    let (f1, _, _) = reference::conv2d(&x, (1, 1, 4, 4), &k1, (1, 3), None, 1, 1, 1, 1);
    let in2: Vec<f64> = x.iter().zip(&f1).map(|(a, b)| a + reference::relu(b * s)).collect();
    let (f2, _, _) = reference::conv2d(&in2, (1, 1, 4, 4), &k2, (1, 3), None, 1, 2, 2, 1);
    for (g, w) in got.iter().zip(f2) {
        assert!((g - reference::relu(w * s)).abs() < 1e-12);
    }
}

#[test]
fn depthwise_weight_count_is_analytic() {
    let cfg = MsdaConfig::new(8, 16, 4);
    let mut store = ParamStore::<f32>::new();
    let block = MsdaBlock::new(&mut store, &mut Initializer::new(0), "m", cfg).unwrap();
    let held: usize = block.branches.iter().map(|b| store.tensor(b.conv.weight).numel()).sum();
    assert_eq!(held, cfg.depthwise_weight_count());
    assert_eq!(held, 3 * 16 * 9);
}

fn scalar_cell(store: &mut ParamStore<f64>, wx: [f64; 4], wh: [f64; 4], b: [f64; 4]) -> ConvLstmCell {
    let cell = ConvLstmCell::new(store, &mut Initializer::new(0), "lstm", 1, 1, 1).unwrap();
    set(store, cell.input_conv.weight, &wx);
    set(store, cell.input_conv.bias.unwrap(), &b);
    set(store, cell.hidden_conv.weight, &wh);
    cell
}

#[test]
fn convlstm_cell_matches_scalar_lstm() {
    let (wx, wh, b) = ([0.7, -0.3, 0.5, 1.1], [0.2, 0.4, -0.6, 0.9], [0.1, 1.0, -0.2, 0.05]);
    let mut store = ParamStore::<f64>::new();
    let cell = scalar_cell(&mut store, wx, wh, b);
    let frames = [[0.5, -1.0, 0.25, 2.0], [-0.3, 0.8, 1.5, -0.7], [0.0, 0.1, -0.2, 0.3]];

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let mut state = None;
    let mut outputs = Vec::new();
    for f in &frames {
        let x = ctx.tape.constant(Tensor::new(&[1, 1, 2, 2], f.to_vec()).unwrap());
        let (s, _) = cell.step(&mut ctx, x, state).unwrap();
        outputs.push(s);
        state = Some(s);
    }

    let gates: [(f64, f64, f64); 4] = std::array::from_fn(|g| (wx[g], wh[g], b[g]));
    for px in 0..4 {
        let (mut h, mut c) = (0.0, 0.0);
        for (t, f) in frames.iter().enumerate() {
            (h, c) = reference::lstm_step(f[px], h, c, gates);
            let gh = tape.value(outputs[t].h).unwrap().data()[px];
            let gc = tape.value(outputs[t].c).unwrap().data()[px];
            assert!((gh - h).abs() < 1e-12 && (gc - c).abs() < 1e-12, "t={t} px={px}");
        }
    }
}

#[test]
fn convlstm_zero_params_and_saturated_forget() {
    let mut store = ParamStore::<f64>::new();
    let cell = scalar_cell(&mut store, [0.0; 4], [0.0; 4], [0.0; 4]);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let x = ctx.tape.constant(Tensor::full(&[1, 1, 2, 2], 0.7).unwrap());
    let (s, g) = cell.step(&mut ctx, x, None).unwrap();
    for (v, want) in [(g.input, 0.5), (g.forget, 0.5), (g.output, 0.5), (g.candidate, 0.0), (s.c, 0.0), (s.h, 0.0)] {
        assert!(tape.value(v).unwrap().data().iter().all(|&a| a == want));
    }

    let mut store = ParamStore::<f64>::new();
    let cell = scalar_cell(&mut store, [0.0; 4], [0.0; 4], [0.0, 20.0, 0.0, 0.0]);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let h = ctx.tape.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
    let c = ctx.tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.3, -1.2, 2.0, 0.0]).unwrap());
    let x = ctx.tape.constant(Tensor::full(&[1, 1, 2, 2], 0.7).unwrap());
    let (s, _) = cell.step(&mut ctx, x, Some(sma_core::nn::ConvLstmState { h, c })).unwrap();
    let (before, after) = (tape.value(c).unwrap(), tape.value(s.c).unwrap());
    assert!(before.max_abs_diff(after).unwrap() < 1e-6);
}

fn lstm_stack(seed: u64) -> (ConvLstm, ParamStore<f64>) {
    let mut store = ParamStore::<f64>::new();
    let cfg = ConvLstmConfig {
        input_channels: 3,
        hidden_channels: 4,
        kernel_size: 3,
        num_layers: 2,
    };
    let lstm = ConvLstm::new(&mut store, &mut Initializer::new(seed), "lstm", cfg).unwrap();
    (lstm, store)
}

#[test]
fn gate_ranges_bound_cell_growth() {
    let mut store = ParamStore::<f64>::new();
    let cell = ConvLstmCell::new(&mut store, &mut Initializer::new(5), "c", 2, 3, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let h = ctx.tape.constant(random(&mut rng, &[2, 3, 4, 4]));
    let c = ctx.tape.constant(Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(-3.0..3.0)).unwrap());
    let x = ctx.tape.constant(Tensor::from_fn(&[2, 2, 4, 4], |_| rng.random_range(-4.0..4.0)).unwrap());
    let (s, g) = cell.step(&mut ctx, x, Some(sma_core::nn::ConvLstmState { h, c })).unwrap();
    let v = |x| tape.value(x).unwrap().data().to_vec();
    for gate in [g.input, g.forget, g.output] {
        assert!(v(gate).iter().all(|&a| a > 0.0 && a < 1.0));
    }
    assert!(v(g.candidate).iter().all(|&a| a > -1.0 && a < 1.0));
    for (new, old) in v(s.c).iter().zip(v(c)) {
        assert!(new.abs() <= old.abs() + 1.0);
    }
}

#[test]
fn unroll_is_order_sensitive() {
    let (lstm, store) = lstm_stack(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames: Vec<Tensor<f64>> = (0..4).map(|_| random(&mut rng, &[1, 3, 3, 3])).collect();
    let last_hidden = |order: &[usize]| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
        let seq: Vec<_> = order.iter().map(|&i| ctx.tape.constant(frames[i].clone())).collect();
        let hs = lstm.unroll(&mut ctx, &seq).unwrap();
        tape.value(*hs.last().unwrap()).unwrap().clone()
    };
    let forward = last_hidden(&[0, 1, 2, 3]);
    let reversed = last_hidden(&[3, 2, 1, 0]);
    assert!(forward.max_abs_diff(&reversed).unwrap() > 1e-3);
}

#[test]
fn unroll_with_zero_params_stays_zero() {
    let (lstm, mut store) = lstm_stack(8);
    store.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval);
    let seq: Vec<_> = (0..3).map(|_| ctx.tape.constant(random(&mut rng, &[2, 3, 3, 3]))).collect();
    let hs = lstm.unroll(&mut ctx, &seq).unwrap();
    assert_eq!(hs.len(), 3);
    for h in hs {
        assert!(tape.value(h).unwrap().data().iter().all(|&a| a == 0.0));
    }
}

#[test]
fn forget_bias_starts_at_one() {
    let (lstm, store) = lstm_stack(9);
    for cell in &lstm.cells {
        let b = store.tensor(cell.input_conv.bias.unwrap()).data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[8..].iter().all(|&v| v == 0.0));
    }
}
