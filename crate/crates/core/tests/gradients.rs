//! Analytic decoder and value-table gradients against central finite
//! differences, in f64.

// tests build with 64-bit Float, where Float <-> f64 casts are no-ops
#![allow(clippy::unnecessary_cast)]

use dkvb::bottleneck::{Bottleneck, BottleneckConfig, DecoderKind, Layout};
use dkvb::heads::{decode_nonparametric, nonparametric_backward, ParametricCache, ParametricDecoder};
use dkvb::numkit::{cross_entropy_with_grad, dropout_mask, Matrix, RngStream};
use dkvb::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const INSTANCES: u64 = 100;
const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

struct Instance {
    b: Bottleneck,
    z: Matrix,
    valid: usize,
    target: usize,
    decoder: Option<ParametricDecoder>,
    mask: Vec<Float>,
}

fn gaussian(rng: &mut RngStream) -> Float {
    let x: f64 = StandardNormal.sample(rng);
    x as Float
}

fn instance(seed: u64, kind: DecoderKind) -> Instance {
    let mut rng = RngStream::new(seed, 7);
    let heads = rng.gen_range(1..=3);
    let d_key = rng.gen_range(2..=4);
    let t = rng.gen_range(1..=5);
    let classes = rng.gen_range(2..=6);
    let d_value = match kind {
        DecoderKind::NonParametric => classes,
        DecoderKind::Parametric => rng.gen_range(2..=5),
    };
    let config = BottleneckConfig {
        d_key,
        codebook_size: rng.gen_range(2..=8),
        d_value,
        decoder: kind,
        ..Default::default()
    };
    let layout = Layout {
        t,
        h: heads * d_key,
        cls_flag: false,
    };
    let mut b = Bottleneck::new(config, layout, seed).unwrap();
    // larger values make the softmax non-trivial
    for cb in &mut b.codebooks {
        cb.values = Matrix::from_fn(cb.values.rows(), d_value, |_, _| gaussian(&mut rng));
    }
    b.freeze();
    let z = Matrix::from_fn(t, layout.h, |_, _| gaussian(&mut rng) * 0.5);
    let valid = rng.gen_range(1..=t);
    let (decoder, mask) = match kind {
        DecoderKind::NonParametric => (None, vec![]),
        DecoderKind::Parametric => {
            let in_dim = heads * d_value;
            let mut d = ParametricDecoder::new(in_dim, classes, 0.3, &mut rng);
            d.bias = Matrix::from_fn(1, classes, |_, _| gaussian(&mut rng) * 0.1);
            let mask = dropout_mask(in_dim, 0.3, &mut rng, true).unwrap();
            (Some(d), mask)
        }
    };
    Instance {
        b,
        z,
        valid,
        target: rng.gen_range(0..classes),
        decoder,
        mask,
    }
}

impl Instance {
    fn loss(&self) -> f64 {
        let rep = self.b.forward(&self.z, self.valid).unwrap();
        let logits = match &self.decoder {
            None => decode_nonparametric(&rep, self.b.config.d_value).unwrap(),
            Some(d) => d.forward(rep.values.as_slice(), &self.mask).unwrap(),
        };
        cross_entropy_with_grad(&logits, self.target).unwrap().0
    }

    fn central(&mut self, get: impl Fn(&mut Self) -> &mut Float) -> f64 {
        let x0 = *get(self);
        *get(self) = x0 + EPS as Float;
        let up = self.loss();
        *get(self) = x0 - EPS as Float;
        let down = self.loss();
        *get(self) = x0;
        (up - down) / (2.0 * EPS)
    }
}

/// `‖a - n‖ / max(‖a‖ + ‖n‖, tiny)` over a parameter group.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Analytic value-table gradients, dense per head.
fn value_grads(inst: &Instance) -> (Vec<Matrix>, Option<(Matrix, Matrix)>) {
    let rep = inst.b.forward(&inst.z, inst.valid).unwrap();
    let (drep, dec) = match &inst.decoder {
        None => {
            let logits = decode_nonparametric(&rep, inst.b.config.d_value).unwrap();
            let (_, dl) = cross_entropy_with_grad(&logits, inst.target).unwrap();
            (nonparametric_backward(&rep, &dl), None)
        }
        Some(d) => {
            let cache = ParametricCache {
                input: rep.values.as_slice().to_vec(),
                mask: inst.mask.clone(),
            };
            let logits = d.forward(&cache.input, &cache.mask).unwrap();
            let (_, dl) = cross_entropy_with_grad(&logits, inst.target).unwrap();
            let g = d.backward(&cache, &dl);
            let drep = Matrix::from_vec(rep.num_heads(), inst.b.config.d_value, g.input).unwrap();
            (drep, Some((g.weight, g.bias)))
        }
    };
    let mut grads = inst.b.zero_value_grads();
    rep.backprop(&drep, &mut grads);
    let dense = grads
        .iter()
        .zip(&inst.b.codebooks)
        .map(|(g, cb)| {
            Matrix::from_fn(cb.values.rows(), cb.values.cols(), |r, c| g.get(r).map_or(0.0, |row| row[c]))
        })
        .collect();
    (dense, dec)
}

fn check_values(inst: &mut Instance, analytic: &[Matrix]) -> f64 {
    let (mut a, mut n) = (vec![], vec![]);
    for (c, g) in analytic.iter().enumerate() {
        for r in 0..g.rows() {
            for j in 0..g.cols() {
                a.push(g.get(r, j) as f64);
                n.push(inst.central(|s| &mut s.b.codebooks[c].values.as_mut_slice()[r * g.cols() + j]));
            }
        }
    }
    rel_error(&a, &n)
}

#[test]
fn nonparametric_value_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut inst = instance(seed, DecoderKind::NonParametric);
        let (analytic, _) = value_grads(&inst);
        let err = check_values(&mut inst, &analytic);
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn parametric_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut inst = instance(1000 + seed, DecoderKind::Parametric);
        let (analytic, dec) = value_grads(&inst);
        let (gw, gb) = dec.unwrap();

        let err = check_values(&mut inst, &analytic);
        assert!(err < TOL, "seed {seed}: values relative error {err:e}");

        let (mut a, mut n) = (vec![], vec![]);
        let cols = gw.cols();
        for i in 0..gw.rows() {
            for j in 0..cols {
                a.push(gw.get(i, j) as f64);
                n.push(inst.central(|s| &mut s.decoder.as_mut().unwrap().weight.as_mut_slice()[i * cols + j]));
            }
        }
        let err = rel_error(&a, &n);
        assert!(err < TOL, "seed {seed}: weight relative error {err:e}");

        let (mut a, mut n) = (vec![], vec![]);
        for j in 0..cols {
            a.push(gb.get(0, j) as f64);
            n.push(inst.central(|s| &mut s.decoder.as_mut().unwrap().bias.as_mut_slice()[j]));
        }
        let err = rel_error(&a, &n);
        assert!(err < TOL, "seed {seed}: bias relative error {err:e}");
    }
}

#[test]
fn parametric_input_gradient_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = RngStream::new(seed, 11);
        let (in_dim, classes) = (rng.gen_range(1..=8), rng.gen_range(2..=5));
        let d = ParametricDecoder::new(in_dim, classes, 0.5, &mut rng);
        let mask = dropout_mask(in_dim, 0.5, &mut rng, true).unwrap();
        let mut input: Vec<Float> = (0..in_dim).map(|_| gaussian(&mut rng)).collect();
        let target = rng.gen_range(0..classes);
        let loss = |x: &[Float]| cross_entropy_with_grad(&d.forward(x, &mask).unwrap(), target).unwrap().0;

        let cache = ParametricCache {
            input: input.clone(),
            mask: mask.clone(),
        };
        let (_, dl) = cross_entropy_with_grad(&d.forward(&input, &mask).unwrap(), target).unwrap();
        let g = d.backward(&cache, &dl);
        let mut n = vec![];
        for i in 0..in_dim {
            let x0 = input[i];
            input[i] = x0 + EPS as Float;
            let up = loss(&input);
            input[i] = x0 - EPS as Float;
            let down = loss(&input);
            input[i] = x0;
            n.push((up - down) / (2.0 * EPS));
        }
        let a: Vec<f64> = g.input.iter().map(|&x| x as f64).collect();
        let err = rel_error(&a, &n);
        assert!(err < TOL, "seed {seed}: input relative error {err:e}");
        // dropped inputs get no gradient
        for (gi, m) in g.input.iter().zip(&mask) {
            if *m == 0.0 {
                assert_eq!(*gi, 0.0);
            }
        }
    }
}

#[test]
fn untouched_value_rows_get_no_gradient() {
    for seed in 0..20 {
        let inst = instance(2000 + seed, DecoderKind::NonParametric);
        let rep = inst.b.forward(&inst.z, inst.valid).unwrap();
        let touched = rep.touched();
        let (analytic, _) = value_grads(&inst);
        for (c, g) in analytic.iter().enumerate() {
            for r in 0..g.rows() {
                if !touched.contains(&(c, r)) {
                    assert!(g.row(r).iter().all(|&x| x == 0.0), "seed {seed} head {c} row {r}");
                }
            }
        }
    }
}
