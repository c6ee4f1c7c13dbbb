//! Central-difference gradient checks for every layer kind and for a whole
//! network, in `f64`.

use crate::error::Result;
use crate::graph::{MspnConfig, NetworkGraph};
use crate::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax_xent_backward, softmax_xent_forward,
    ConvLayer, FullyConnectedLayer, SspLayer,
};
use crate::tensor::{FeatureMapStack, FlatVector, PoolMode};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per random shape when a tensor is larger than this.
const MAX_COORDS: usize = 48;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub kind: String,
    pub shapes: usize,
    pub coords: usize,
    /// Coordinates rejected because a perturbation crossed a nonsmooth point.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < TOLERANCE)
    }
}

#[derive(Default)]
struct Tally {
    coords: usize,
    skipped: usize,
    worst: f64,
}

impl Tally {
    /// Compares `analytic[i]` with a central difference of `f` along coordinate `i`
    /// of `x`, for a random subset of coordinates.
    fn probe<R: Rng>(&mut self, rng: &mut R, x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
        let picks: Vec<usize> = if x.len() <= MAX_COORDS {
            (0..x.len()).collect()
        } else {
            sample(rng, x.len(), MAX_COORDS).into_vec()
        };
        let mut buf = x.to_vec();
        for i in picks {
            buf[i] = x[i] + EPSILON;
            let up = f(&buf);
            buf[i] = x[i] - EPSILON;
            let down = f(&buf);
            buf[i] = x[i];
            let numeric = (up - down) / (2.0 * EPSILON);
            self.worst = self.worst.max(relative_error(analytic[i], numeric));
            self.coords += 1;
        }
    }

    fn entry(self, kind: &str, shapes: usize) -> GradcheckEntry {
        GradcheckEntry {
            kind: kind.to_string(),
            shapes,
            coords: self.coords,
            skipped: self.skipped,
            max_rel_error: self.worst,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values whose pairwise gaps and distance from zero all exceed `gap`, so a
/// perturbation of size `EPSILON` cannot cross a max or ReLU kink.
fn kink_free<R: Rng>(rng: &mut R, n: usize, gap: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (1..=n).map(|i| i as f64 * gap * 2.0 * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    for x in &mut v {
        *x += rng.gen_range(-0.5 * gap..0.5 * gap);
    }
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn maps(n: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMapStack<f64> {
    FeatureMapStack::from_vec(n, h, w, data).expect("valid gradcheck shape")
}

fn check_conv<R: Rng>(rng: &mut R, trials: usize) -> Result<GradcheckEntry> {
    let mut t = Tally::default();
    for _ in 0..trials {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (ph, pw) = (rng.gen_range(0..2), rng.gen_range(0..2));
        let h = rng.gen_range(kh.max(2)..kh + 5);
        let w = rng.gen_range(kw.max(2)..kw + 6);
        let mut layer = ConvLayer::<f64>::init(rng, cin, cout, (kh, kw), (ph, pw))?;
        layer.bias = uniform(rng, cout);
        let x = maps(cin, h, w, uniform(rng, cin * h * w));
        let y = layer.forward(&x)?;
        let (_, oh, ow) = y.shape();
        let r = uniform(rng, y.data().len());
        let g = layer.backward(&x, &maps(cout, oh, ow, r.clone()))?;
        let obj = |l: &ConvLayer<f64>, x: &FeatureMapStack<f64>| dot(l.forward(x).expect("shape checked").data(), &r);
        t.probe(rng, x.data(), g.input.data(), |v| obj(&layer, &maps(cin, h, w, v.to_vec())));
        t.probe(rng, &layer.weights, &g.weights, |v| {
            let mut l = layer.clone();
            l.weights = v.to_vec();
            obj(&l, &x)
        });
        t.probe(rng, &layer.bias, &g.bias, |v| {
            let mut l = layer.clone();
            l.bias = v.to_vec();
            obj(&l, &x)
        });
    }
    Ok(t.entry("conv", trials))
}

fn check_fc<R: Rng>(rng: &mut R, trials: usize) -> Result<GradcheckEntry> {
    let mut t = Tally::default();
    for _ in 0..trials {
        let (din, dout) = (rng.gen_range(1..20), rng.gen_range(1..12));
        let mut layer = FullyConnectedLayer::<f64>::init(rng, din, dout)?;
        layer.bias = uniform(rng, dout);
        let x = FlatVector::new(uniform(rng, din));
        let r = uniform(rng, dout);
        let g = layer.backward(&x, &FlatVector::new(r.clone()))?;
        let obj = |l: &FullyConnectedLayer<f64>, x: &FlatVector<f64>| dot(l.forward(x).expect("dims checked").data(), &r);
        t.probe(rng, x.data(), g.input.data(), |v| obj(&layer, &FlatVector::new(v.to_vec())));
        t.probe(rng, &layer.weights, &g.weights, |v| {
            let mut l = layer.clone();
            l.weights = v.to_vec();
            obj(&l, &x)
        });
        t.probe(rng, &layer.bias, &g.bias, |v| {
            let mut l = layer.clone();
            l.bias = v.to_vec();
            obj(&l, &x)
        });
    }
    Ok(t.entry("fc", trials))
}

fn check_maxpool<R: Rng>(rng: &mut R, trials: usize) -> Result<GradcheckEntry> {
    let mut t = Tally::default();
    for _ in 0..trials {
        let (n, h, w) = (rng.gen_range(1..4), rng.gen_range(2..9), rng.gen_range(2..11));
        let x = maps(n, h, w, kink_free(rng, n * h * w, 1e-3));
        let (y, saved) = maxpool_forward(&x)?;
        let (_, oh, ow) = y.shape();
        let r = uniform(rng, y.data().len());
        let g = maxpool_backward(&maps(n, oh, ow, r.clone()), &saved)?;
        t.probe(rng, x.data(), g.data(), |v| {
            dot(maxpool_forward(&maps(n, h, w, v.to_vec())).expect("shape checked").0.data(), &r)
        });
    }
    Ok(t.entry("maxpool", trials))
}

fn check_relu<R: Rng>(rng: &mut R, trials: usize) -> Result<GradcheckEntry> {
    let mut t = Tally::default();
    for _ in 0..trials {
        let n = rng.gen_range(1..64);
        let x = kink_free(rng, n, 1e-3);
        let r = uniform(rng, n);
        let mut g = vec![0.0; n];
        relu_backward(&x, &r, &mut g)?;
        t.probe(rng, &x, &g, |v| dot(&relu_forward(v), &r));
    }
    Ok(t.entry("relu", trials))
}

fn check_ssp<R: Rng>(rng: &mut R, trials: usize, mode: PoolMode) -> Result<GradcheckEntry> {
    let layer = SspLayer::new(mode);
    let mut t = Tally::default();
    for _ in 0..trials {
        let (n, h, w) = (rng.gen_range(1..5), rng.gen_range(1..8), rng.gen_range(1..40));
        let x = maps(n, h, w, kink_free(rng, n * h * w, 1e-3));
        let (y, saved) = layer.forward(&x);
        let r = uniform(rng, y.len());
        let g = layer.backward(&FlatVector::new(r.clone()), &saved)?;
        t.probe(rng, x.data(), g.data(), |v| dot(layer.forward(&maps(n, h, w, v.to_vec())).0.data(), &r));
    }
    Ok(t.entry(&format!("ssp-{mode}"), trials))
}

fn check_softmax_xent<R: Rng>(rng: &mut R, trials: usize) -> Result<GradcheckEntry> {
    let mut t = Tally::default();
    for _ in 0..trials {
        let k = rng.gen_range(2..16);
        let label = rng.gen_range(0..k);
        let z: Vec<f64> = uniform(rng, k).iter().map(|v| v * 4.0).collect();
        let dloss = rng.gen_range(0.5..2.0);
        let (p, _) = softmax_xent_forward(&z, label)?;
        let g = softmax_xent_backward(&p, label, dloss)?;
        t.probe(rng, &z, &g, |v| dloss * softmax_xent_forward(v, label).expect("label in range").1);
    }
    Ok(t.entry("softmax-xent", trials))
}

/// Central differences with steps `EPSILON` and `EPSILON / 2` agree, which
/// holds for smooth functions and fails when a ReLU or max kink lies within
/// `EPSILON`. Uses loss values only, never the analytic gradient.
fn smooth_at(full: f64, half: f64) -> bool {
    (full - half).abs() <= 1e-8 + 1e-6 * full.abs().max(half.abs())
}

/// Small network on a `1x32x30` input; perturbs `n_coords` random parameter
/// coordinates spread across all tensors. The input cannot be made kink free
/// through the whole network, so probes that straddle a kink are resampled.
fn check_graph<R: Rng>(rng: &mut R, mode: PoolMode, n_coords: usize) -> Result<GradcheckEntry> {
    let cfg = MspnConfig {
        channels: [3, 4, 5, 6],
        fc_widths: [8, 8],
        ssp_mode: mode,
        ..MspnConfig::default()
    };
    let mut net = NetworkGraph::<f64>::mspn(cfg, rng.gen())?;
    // non-zero biases keep ReLU units away from exact zeros
    let n_tensors = net.params().len();
    for (i, p) in net.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            p.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    let x = maps(1, 32, 30, uniform(rng, 32 * 30));
    let label = rng.gen_range(0..net.n_classes());
    let (_, grads) = net.loss_and_grads(&x, label)?;
    let mut t = Tally::default();
    let loss_of = |n: &NetworkGraph<f64>| n.forward(&x).and_then(|p| p.loss(label)).expect("valid input");
    let central = |net: &mut NetworkGraph<f64>, ti: usize, i: usize, base: f64, step: f64| {
        net.params_mut()[ti][i] = base + step;
        let up = loss_of(net);
        net.params_mut()[ti][i] = base - step;
        let down = loss_of(net);
        net.params_mut()[ti][i] = base;
        (up - down) / (2.0 * step)
    };
    while t.coords < n_coords {
        if t.skipped >= n_coords {
            // too many nonsmooth probes to trust the sample
            t.worst = f64::INFINITY;
            break;
        }
        let ti = rng.gen_range(0..n_tensors);
        let i = rng.gen_range(0..grads.tensors[ti].len());
        let base = net.params()[ti][i];
        let numeric = central(&mut net, ti, i, base, EPSILON);
        if !smooth_at(numeric, central(&mut net, ti, i, base, EPSILON / 2.0)) {
            t.skipped += 1;
            continue;
        }
        t.worst = t.worst.max(relative_error(grads.tensors[ti][i], numeric));
        t.coords += 1;
    }
    Ok(t.entry(&format!("graph-{mode}"), 1))
}

/// Runs every check with `trials` random shapes per layer kind (at least 20)
/// and 200 parameter coordinates per whole-network check.
pub fn run_gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let trials = trials.max(20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = vec![
        check_conv(&mut rng, trials)?,
        check_maxpool(&mut rng, trials)?,
        check_relu(&mut rng, trials)?,
        check_fc(&mut rng, trials)?,
        check_ssp(&mut rng, trials, PoolMode::Max)?,
        check_ssp(&mut rng, trials, PoolMode::Average)?,
        check_softmax_xent(&mut rng, trials)?,
        check_graph(&mut rng, PoolMode::Max, 200)?,
        check_graph(&mut rng, PoolMode::Average, 200)?,
    ];
    Ok(GradcheckReport { entries })
}
