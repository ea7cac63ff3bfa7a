//! Finite-difference verification of every hand-derived gradient.
//!
//! Each component draws random instances, evaluates its analytic gradient and
//! compares it against central differences of the scalar function alone. The
//! error of one instance is `|a - n| / max(|a|, |n|, 1e-6)` over the full
//! gradient vector; a component reports the worst instance.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::htb::{adjust_backward, adjust_logits, htb_loss, HtbConfig, MovingGradient, Phi, Teacher};
use crate::losses::{asl, compute_gamma_ht, focal, mfm, sigmoid, HeadTailFactor, LossKind, MfmConfig};
use crate::netcore::{dot, AdditiveAttention, Mlp, NormalizedHead, ParamSet};
use crate::trainer::{objective, ArchConfig, Frozen, TrainConfig, TriModel};

pub const FD_STEP: f64 = 1e-5;
pub const COMPONENT_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Focal,
    Asl,
    Mfm,
    Mlp,
    Attention,
    Head,
    Adjust,
    Htb,
    Composite,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::Focal,
        Component::Asl,
        Component::Mfm,
        Component::Mlp,
        Component::Attention,
        Component::Head,
        Component::Adjust,
        Component::Htb,
        Component::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Focal => "focal",
            Component::Asl => "asl",
            Component::Mfm => "mfm",
            Component::Mlp => "mlp",
            Component::Attention => "attention",
            Component::Head => "head",
            Component::Adjust => "adjust",
            Component::Htb => "htb",
            Component::Composite => "composite",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Component::Composite => COMPOSITE_TOLERANCE,
            _ => COMPONENT_TOLERANCE,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid("component", format!("unknown component `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Random instances per component (the composite check uses a fifth of
    /// this, at least one).
    pub instances: usize,
    /// Negate the analytic gradient of one component; the check must fail.
    pub inject_sign_flip: Option<Component>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            instances: 100,
            inject_sign_flip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub component: Component,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = dot(analytic, analytic).sqrt();
    let nn = dot(numeric, numeric).sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + FD_STEP;
            let fp = f(&xp);
            xp[i] = orig - FD_STEP;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central differences of `f` w.r.t. every parameter of `m`, in `flatten()` order.
pub fn numeric_param_grad<M: ParamSet + Clone>(m: &M, mut f: impl FnMut(&M) -> f64) -> Vec<f64> {
    let mut work = m.clone();
    let shapes: Vec<usize> = m.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(shapes.iter().sum());
    for (t, &len) in shapes.iter().enumerate() {
        for j in 0..len {
            let orig = work.params()[t][j];
            work.params_mut()[t][j] = orig + FD_STEP;
            let fp = f(&work);
            work.params_mut()[t][j] = orig - FD_STEP;
            let fm = f(&work);
            work.params_mut()[t][j] = orig;
            out.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    out
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

fn sig(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| sigmoid(v)).collect()
}

fn random_mfm(rng: &mut ChaCha8Rng) -> MfmConfig {
    let pos = rng.random_range(0.0..2.0);
    MfmConfig {
        gamma_pn_pos: pos,
        gamma_pn_neg: pos + rng.random_range(0.0..3.0),
        w_pos: rng.random_range(-1.0..1.0),
        w_neg: rng.random_range(-1.0..2.0),
        prob_clamp: 1e-6,
    }
}

fn random_ht(rng: &mut ChaCha8Rng, n: usize) -> HeadTailFactor {
    let counts: Vec<usize> = (0..n).map(|_| rng.random_range(1..300)).collect();
    compute_gamma_ht(&counts, rng.random_range(0.0..2.0)).expect("positive counts")
}

/// One instance: returns (analytic, numeric).
fn instance(component: Component, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    const C: usize = 5;
    match component {
        Component::Focal => {
            let z = uniform_vec(rng, C, -4.0, 4.0);
            let y = labels(rng, C);
            let g = rng.random_range(0.0..4.0);
            let a = focal(&sig(&z), &y, g)?.grad;
            let n = numeric_grad(&z, |z| focal(&sig(z), &y, g).unwrap().loss);
            Ok((a, n))
        }
        Component::Asl => {
            let z = uniform_vec(rng, C, -4.0, 4.0);
            let y = labels(rng, C);
            let gp = rng.random_range(0.0..2.0);
            let gn = gp + rng.random_range(0.0..3.0);
            let a = asl(&sig(&z), &y, gp, gn)?.grad;
            let n = numeric_grad(&z, |z| asl(&sig(z), &y, gp, gn).unwrap().loss);
            Ok((a, n))
        }
        Component::Mfm => {
            let z = uniform_vec(rng, C, -4.0, 4.0);
            let y = labels(rng, C);
            let cfg = random_mfm(rng);
            let ht = random_ht(rng, C);
            let a = mfm(&sig(&z), &y, &cfg, &ht)?.grad;
            let n = numeric_grad(&z, |z| mfm(&sig(z), &y, &cfg, &ht).unwrap().loss);
            Ok((a, n))
        }
        Component::Mlp => {
            let m = Mlp::new(&[4, 6, 5], rng)?;
            let x = uniform_vec(rng, 4, -2.0, 2.0);
            let r = uniform_vec(rng, 5, -1.0, 1.0);
            let (_, tape) = m.forward(&x)?;
            let mut g = m.zeros_like();
            let gx = m.backward(&tape, &r, &mut g);
            let mut a = g.flatten();
            a.extend(gx);
            let mut n = numeric_param_grad(&m, |mm| dot(&r, &mm.forward(&x).unwrap().0));
            n.extend(numeric_grad(&x, |xx| dot(&r, &m.forward(xx).unwrap().0)));
            Ok((a, n))
        }
        Component::Head => {
            let groups = [1, 2, 4][rng.random_range(0..3)];
            let eta = [0.0, 1e-6, 0.1][rng.random_range(0..3)];
            let h = NormalizedHead::new(4, 8, groups, 16.0, eta, rng)?;
            let f = uniform_vec(rng, 8, -2.0, 2.0);
            let r = uniform_vec(rng, 4, -1.0, 1.0);
            let z = h.forward(&f)?;
            let mut g = h.zeros_like();
            let gf = h.backward(&f, &z, &r, &mut g);
            let mut a = g.flatten();
            a.extend(gf);
            let mut n = numeric_param_grad(&h, |hh| dot(&r, &hh.forward(&f).unwrap()));
            n.extend(numeric_grad(&f, |ff| dot(&r, &h.forward(ff).unwrap())));
            Ok((a, n))
        }
        Component::Attention => {
            let att = AdditiveAttention::new(6, 4, rng)?;
            let q = uniform_vec(rng, 6, -1.5, 1.5);
            let kh = uniform_vec(rng, 6, -1.5, 1.5);
            let kt = uniform_vec(rng, 6, -1.5, 1.5);
            let r = uniform_vec(rng, 6, -1.0, 1.0);
            let (_, tape) = att.forward(&q, &[&kh, &kt])?;
            let mut g = att.zeros_like();
            let (gq, gk) = att.backward(&q, &[&kh, &kt], &tape, &r, &mut g);
            let mut a = g.flatten();
            a.extend(&gq);
            a.extend(&gk[0]);
            a.extend(&gk[1]);
            let mut n = numeric_param_grad(&att, |m| dot(&r, &m.forward(&q, &[&kh, &kt]).unwrap().0));
            n.extend(numeric_grad(&q, |v| dot(&r, &att.forward(v, &[&kh, &kt]).unwrap().0)));
            n.extend(numeric_grad(&kh, |v| dot(&r, &att.forward(&q, &[v, &kt]).unwrap().0)));
            n.extend(numeric_grad(&kt, |v| dot(&r, &att.forward(&q, &[&kh, v]).unwrap().0)));
            Ok((a, n))
        }
        Component::Adjust => {
            let head = NormalizedHead::new(4, 8, 2, 16.0, 1e-6, rng)?;
            let mg = MovingGradient {
                e: uniform_vec(rng, 8, -1.0, 1.0),
                mu: 0.9,
            };
            let z = uniform_vec(rng, 4, -3.0, 3.0);
            let r = uniform_vec(rng, 4, -1.0, 1.0);
            let teacher = if rng.random_bool(0.5) { Teacher::Head } else { Teacher::Tail };
            let (_, tape) = adjust_logits(&z, teacher, &head, &mg)?;
            let mut g = head.zeros_like();
            let gz = adjust_backward(&z, &tape, &r, &head, &mg, &mut g);
            let mut a = gz;
            a.extend(g.flatten());
            let mut n = numeric_grad(&z, |zz| dot(&r, &adjust_logits(zz, teacher, &head, &mg).unwrap().0));
            n.extend(numeric_param_grad(&head, |hh| {
                dot(&r, &adjust_logits(&z, teacher, hh, &mg).unwrap().0)
            }));
            Ok((a, n))
        }
        Component::Htb => {
            let zh = uniform_vec(rng, C, -2.0, 2.0);
            let zt = uniform_vec(rng, C, -2.0, 2.0);
            let zb = uniform_vec(rng, C, -2.0, 2.0);
            let y = labels(rng, C);
            let mcfg = random_mfm(rng);
            let exps = mcfg.exponents(&random_ht(rng, C));
            let cfg = HtbConfig {
                alpha: rng.random_range(0.5..4.0),
                prob_clamp: 1e-6,
                phi: if rng.random_bool(0.5) { Phi::Softmax } else { Phi::Sigmoid },
            };
            let base = htb_loss(&zh, &zt, &zb, &y, &cfg, &exps, None)?;
            let k = Some((base.kappa_head, base.kappa_tail));
            let mut a = base.grad_head.clone();
            a.extend(&base.grad_tail);
            a.extend(&base.grad_balanced);
            let loss = |h: &[f64], t: &[f64], b: &[f64]| htb_loss(h, t, b, &y, &cfg, &exps, k).unwrap().loss;
            let mut n = numeric_grad(&zh, |v| loss(v, &zt, &zb));
            n.extend(numeric_grad(&zt, |v| loss(&zh, v, &zb)));
            n.extend(numeric_grad(&zb, |v| loss(&zh, &zt, v)));
            Ok((a, n))
        }
        Component::Composite => composite_instance(rng),
    }
}

/// Full objective on a 2-sample, C=3, d=8 problem with a non-zero moving
/// vector; gradients w.r.t. every parameter of all three models.
fn composite_instance(rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    const C: usize = 3;
    const D: usize = 8;
    let cfg = TrainConfig {
        arch: ArchConfig {
            hidden: vec![6],
            feature_dim: 4,
            groups: 2,
            rho: 16.0,
            eta: 1e-6,
            attention_hidden: 3,
        },
        loss: LossKind::Mfm,
        ..TrainConfig::default()
    };
    let model = TriModel::new(D, C, &cfg.arch, rng)?;
    let mg = MovingGradient {
        e: uniform_vec(rng, cfg.arch.feature_dim, -0.5, 0.5),
        mu: cfg.mu,
    };
    let xs: Vec<Vec<f64>> = (0..2).map(|_| uniform_vec(rng, D, -1.0, 1.0)).collect();
    let x_refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let targets: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let mut y = labels(rng, C);
            y[rng.random_range(0..C)] = 1;
            y
        })
        .collect();
    let ht_s = random_ht(rng, C);
    let ht_d = random_ht(rng, C);
    let mut frozen = Frozen {
        targets,
        exps_static: cfg.mfm.exponents(&ht_s),
        exps_dynamic: cfg.mfm.exponents(&ht_d),
        coefficient: 2.0,
        kappa: None,
    };
    let base = objective(&model, &cfg, &mg, &x_refs, &frozen)?;
    frozen.kappa = base.kappa;
    let a = base.grads.flatten();
    let n = numeric_param_grad(&model, |m| objective(m, &cfg, &mg, &x_refs, &frozen).unwrap().total);
    Ok((a, n))
}

pub fn check_component(component: Component, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut seed_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let salt = Component::ALL.iter().position(|&c| c == component).unwrap() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_rng.random::<u64>() ^ (salt << 32));
    let instances = match component {
        Component::Composite => (opts.instances / 5).max(1),
        _ => opts.instances.max(1),
    };
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (mut a, n) = instance(component, &mut rng)?;
        if opts.inject_sign_flip == Some(component) {
            a.iter_mut().for_each(|v| *v = -*v);
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(GradCheckReport {
        component,
        instances,
        max_rel_err: worst,
        tolerance: component.tolerance(),
    })
}

pub fn check_all(components: &[Component], opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    components.iter().map(|&c| check_component(c, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_component_names() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
        assert!("nope".parse::<Component>().is_err());
    }

    #[test]
    fn sign_flip_is_detected() {
        let opts = GradCheckOptions {
            instances: 5,
            inject_sign_flip: Some(Component::Focal),
            ..Default::default()
        };
        assert!(!check_component(Component::Focal, &opts).unwrap().passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
