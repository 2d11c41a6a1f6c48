use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unirecon::distill::{at_loss_grad, attention_map, at_loss_cascade_with, AtNorm};
use unirecon::kspace::{make_gaussian_mask, undersample, zero_filled, DcMode};
use unirecon::recon_net::{
    aspin_forward, instance_norm, instance_norm_backward, Activation, Architecture, CascadeModel,
    TracePoint, TraceSpec,
};
use unirecon::ImageTensor;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-4;

/// Relative error; below `FLOOR` the difference quotient is dominated by
/// rounding noise, so magnitudes are clamped there.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn phantom(h: usize, w: usize) -> ImageTensor<f64> {
    let v: Vec<f64> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            0.4 + 0.3 * (0.9 * r).sin() * (0.6 * c + 0.2).cos()
        })
        .collect();
    ImageTensor::from_real(h, w, &v).unwrap()
}

#[test]
fn instance_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, h, w) = (3, 4, 4);
    let x = Activation::new(c, h, w, random_vec(&mut rng, c * h * w, 1.0)).unwrap();
    let gamma = random_vec(&mut rng, c, 2.0);
    let beta = random_vec(&mut rng, c, 1.0);
    let r = random_vec(&mut rng, c * h * w, 1.0);
    let eps = 1e-5;
    let loss = |x: &Activation<f64>, g: &[f64], b: &[f64]| dot(instance_norm(x, g, b, eps).unwrap().data(), &r);
    let (gx, gg, gb) = instance_norm_backward(&x, &gamma, eps, &Activation::new(c, h, w, r.clone()).unwrap()).unwrap();
    for i in 0..x.data().len() {
        let mut p = x.clone();
        p.data_mut()[i] += STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= STEP;
        let n = (loss(&p, &gamma, &beta) - loss(&m, &gamma, &beta)) / (2.0 * STEP);
        assert!(rel_err(gx.data()[i], n) < TOL, "input {i}: {} vs {n}", gx.data()[i]);
    }
    for i in 0..c {
        let mut p = gamma.clone();
        p[i] += STEP;
        let mut m = gamma.clone();
        m[i] -= STEP;
        let n = (loss(&x, &p, &beta) - loss(&x, &m, &beta)) / (2.0 * STEP);
        assert!(rel_err(gg[i], n) < TOL);
        let mut p = beta.clone();
        p[i] += STEP;
        let mut m = beta.clone();
        m[i] -= STEP;
        let n = (loss(&x, &gamma, &p) - loss(&x, &gamma, &m)) / (2.0 * STEP);
        assert!(rel_err(gb[i], n) < TOL);
    }
}

#[test]
fn normalized_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h, w) = (4, 8, 8);
    let x = Activation::new(c, h, w, random_vec(&mut rng, c * h * w, 3.0)).unwrap();
    let y = instance_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
    for ch in y.data().chunks(h * w) {
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

fn small_arch() -> Architecture {
    Architecture {
        features: 6,
        ..Architecture::d5c5()
    }
}

/// Perturbs a handful of entries of every tensor and compares against
/// the analytic gradient.
fn check_model_grads(
    model: &CascadeModel<f64>,
    analytic: &unirecon::recon_net::Gradients<f64>,
    want: &[bool],
    loss: &dyn Fn(&CascadeModel<f64>) -> f64,
    per_tensor: usize,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    for t in 0..model.tensor_count() {
        if !want[t] {
            assert!(analytic.get(t).is_none(), "unwanted tensor {t} got a gradient");
            continue;
        }
        let g = analytic.get(t).expect("wanted gradient missing");
        for _ in 0..per_tensor {
            let i = rng.gen_range(0..g.len());
            let mut p = model.clone();
            p.param_mut(t)[i] += STEP;
            let mut m = model.clone();
            m.param_mut(t)[i] -= STEP;
            let n = (loss(&p) - loss(&m)) / (2.0 * STEP);
            assert!(
                rel_err(g[i], n) < TOL,
                "{}[{i}]: analytic {} vs numeric {n}",
                model.param_name(t),
                g[i]
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn aspin_forward_gradient_through_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = CascadeModel::<f64>::universal(small_arch(), &["a", "b"], 5).unwrap();
    for t in model.base_param_indices().end..model.tensor_count() {
        for v in model.param_mut(t) {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let x = Activation::new(6, 4, 4, random_vec(&mut rng, 96, 1.0)).unwrap();
    let r = random_vec(&mut rng, 96, 1.0);
    let bank = model.bank().unwrap();
    let out = aspin_forward(&x, 7, 1, bank, 1e-5).unwrap();
    let (_, gg, gb) = instance_norm_backward(&x, bank.gamma(1, 7).unwrap(), 1e-5, &Activation::new(6, 4, 4, r.clone()).unwrap()).unwrap();
    let loss = |m: &CascadeModel<f64>| dot(aspin_forward(&x, 7, 1, m.bank().unwrap(), 1e-5).unwrap().data(), &r);
    assert_eq!(out.shape(), [6, 4, 4]);
    let [gi, bi] = model.anatomy_param_indices(1);
    for ch in 0..6 {
        let off = 7 * 6 + ch;
        for (idx, analytic) in [(gi, gg[ch]), (bi, gb[ch])] {
            let mut p = model.clone();
            p.param_mut(idx)[off] += STEP;
            let mut m = model.clone();
            m.param_mut(idx)[off] -= STEP;
            let n = (loss(&p) - loss(&m)) / (2.0 * STEP);
            assert!(rel_err(analytic, n) < TOL);
        }
    }
}

#[test]
fn conv_block_gradient_with_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = phantom(8, 8);
    for bank in [false, true] {
        let model = if bank {
            let mut m = CascadeModel::<f64>::universal(small_arch(), &["a", "b"], 11).unwrap();
            for t in m.base_param_indices().end..m.tensor_count() {
                for v in m.param_mut(t) {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
            m
        } else {
            CascadeModel::<f64>::new(small_arch(), 11).unwrap()
        };
        let anatomy = bank.then_some(1);
        for point in [TracePoint::PreActivation, TracePoint::PostActivation] {
            let spec = TraceSpec { layer: 3, point };
            let (tape, out) = model.block_tape(&x, 2, anatomy, spec).unwrap();
            let r = random_vec(&mut rng, out.len(), 1.0);
            let (_, trace) = model.cnn_block_forward(&x, 2, anatomy, spec).unwrap();
            let rt = random_vec(&mut rng, trace.data().len(), 1.0);
            let want = vec![true; model.tensor_count()];
            let (g_in, grads) = model
                .block_backward(&tape, 2, 8, 8, anatomy, spec, &r, Some(&rt), &want)
                .unwrap();
            let loss_at = |m: &CascadeModel<f64>, x: &ImageTensor<f64>| {
                let (o, t) = m.cnn_block_forward(x, 2, anatomy, spec).unwrap();
                dot(o.data(), &r) + dot(t.data(), &rt)
            };
            let loss = |m: &CascadeModel<f64>| loss_at(m, &x);
            // only cascade 3 tensors and anatomy 1's affine set get gradients
            let want_eff: Vec<bool> = (0..model.tensor_count())
                .map(|t| grads.get(t).is_some())
                .collect();
            assert_eq!(want_eff.iter().filter(|&&b| b).count(), 10 + if bank { 2 } else { 0 });
            if bank {
                let [g0, b0] = model.anatomy_param_indices(0);
                assert!(grads.get(g0).is_none() && grads.get(b0).is_none());
            }
            check_model_grads(&model, &grads, &want_eff, &loss, 4);
            for i in (0..x.data().len()).step_by(7) {
                let mut p = x.clone();
                p.data_mut()[i] += STEP;
                let mut m = x.clone();
                m.data_mut()[i] -= STEP;
                let n = (loss_at(&model, &p) - loss_at(&model, &m)) / (2.0 * STEP);
                assert!(rel_err(g_in[i], n) < TOL);
            }
        }
    }
}

#[test]
fn full_model_gradient_hard_and_soft_dc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = phantom(8, 8);
    let mask = make_gaussian_mask(8, 8, 2.0, 0.25, 3).unwrap();
    let y = undersample(&gt, &mask).unwrap();
    let xu = zero_filled(&y).unwrap();
    for dc in [DcMode::Hard, DcMode::Soft { lambda: 0.7 }] {
        let arch = Architecture { dc, ..Architecture::d5c5() };
        let model = CascadeModel::<f64>::universal(arch, &["a", "b"], 21).unwrap();
        let spec = TraceSpec::default();
        let tape = model.forward_tape(&xu, &y, &mask, Some(0), Some(spec)).unwrap();
        let r = random_vec(&mut rng, 128, 1.0);
        let traces = tape.traces().unwrap();
        let rt: Vec<Vec<f64>> = traces.iter().map(|t| random_vec(&mut rng, t.data().len(), 0.1)).collect();
        let want = vec![true; model.tensor_count()];
        let grads = model.backward(&tape, &r, Some(&rt), &want).unwrap();
        let [g1, b1] = model.anatomy_param_indices(1);
        assert!(grads.get(g1).is_none() && grads.get(b1).is_none());
        let want_eff: Vec<bool> = (0..model.tensor_count()).map(|t| t != g1 && t != b1).collect();
        let loss = |m: &CascadeModel<f64>| {
            let tp = m.forward_tape(&xu, &y, &mask, Some(0), Some(spec)).unwrap();
            let tr = tp.traces().unwrap();
            dot(tp.output().data(), &r) + tr.iter().zip(&rt).map(|(t, g)| dot(t.data(), g)).sum::<f64>()
        };
        check_model_grads(&model, &grads, &want_eff, &loss, 3);
    }
}

#[test]
fn frozen_tensors_get_no_gradient() {
    let gt = phantom(8, 8);
    let mask = make_gaussian_mask(8, 8, 2.0, 0.25, 3).unwrap();
    let y = undersample(&gt, &mask).unwrap();
    let xu = zero_filled(&y).unwrap();
    let mut model = CascadeModel::<f64>::universal(small_arch(), &["a"], 2).unwrap();
    model.add_anatomy("new").unwrap();
    let want: Vec<bool> = (0..model.tensor_count())
        .map(|t| model.anatomy_param_indices(1).contains(&t))
        .collect();
    let tape = model.forward_tape(&xu, &y, &mask, Some(1), None).unwrap();
    let r = vec![1.0; 128];
    let grads = model.backward(&tape, &r, None, &want).unwrap();
    let got: Vec<usize> = grads.computed().map(|(i, _)| i).collect();
    assert_eq!(got, model.anatomy_param_indices(1).to_vec());
    let loss = |m: &CascadeModel<f64>| dot(m.forward(&xu, &y, &mask, Some(1)).unwrap().data(), &r);
    check_model_grads(&model, &grads, &want, &loss, 8);
}

#[test]
fn attention_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for norm in [AtNorm::Flattened, AtNorm::PerRow] {
        let t = Activation::new(2, 4, 4, random_vec(&mut rng, 32, 1.0)).unwrap();
        let s = Activation::new(2, 4, 4, random_vec(&mut rng, 32, 1.0)).unwrap();
        let (l, g) = at_loss_grad(&t, &s, norm).unwrap();
        let f = |s: &Activation<f64>| {
            at_loss_cascade_with(&attention_map(&t).unwrap(), &attention_map(s).unwrap(), norm).unwrap()
        };
        assert!((l - f(&s)).abs() < 1e-12);
        for i in 0..32 {
            let mut p = s.clone();
            p.data_mut()[i] += STEP;
            let mut m = s.clone();
            m.data_mut()[i] -= STEP;
            let n = (f(&p) - f(&m)) / (2.0 * STEP);
            assert!(rel_err(g[i], n) < TOL, "{norm:?} {i}: {} vs {n}", g[i]);
        }
    }
}
