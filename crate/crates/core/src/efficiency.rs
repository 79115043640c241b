//! Adaptation-speed measurement and analytic FLOPs accounting.
//!
//! Convergence is patience-based: the model is evaluated every
//! `eval_interval` iterations, the best novel AP is tracked on the fly, and
//! once the best goes unsurpassed (strictly) for `patience` consecutive
//! iterations the run is considered converged at the iteration that produced
//! the best value.



use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpeedProtocol {
    pub eval_interval: u64,
    pub patience: u64,
    pub max_budget: u64,
}

impl Default for SpeedProtocol {
    fn default() -> Self {
        // Desk-scale defaults; the rule itself is what matters.
        Self {
            eval_interval: 50,
            patience: 300,
            max_budget: 3000,
        }
    }
}

impl SpeedProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval == 0 {
            return Err(CoreError::Config("eval_interval must be > 0".into()));
        }
        if self.patience == 0 || self.patience % self.eval_interval != 0 {
            return Err(CoreError::Config(
                "patience must be a positive multiple of eval_interval".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    /// (iteration, novel AP) pairs, truncated at the point the rule fired.
    pub curve: Vec<(u64, f64)>,
    pub best_nap: f64,
    pub convergence_iteration: u64,
    pub budget_exhausted: bool,
}

/// Apply the patience rule to an evaluation curve.
///
/// A tie with the recorded best does not count as surpassing it. When the
/// rule fires, the curve is reported up to and including the firing point, so
/// appending later evaluations cannot change the result. When it never fires
/// the whole curve is reported with `budget_exhausted` set.
pub fn detect_convergence(curve: &[(u64, f64)], protocol: &SpeedProtocol) -> Result<SpeedReport> {
    protocol.validate()?;
    if curve.is_empty() {
        return Err(CoreError::Data("empty evaluation curve".into()));
    }
    let mut prev = None;
    for &(iter, _nap) in curve {
        if iter % protocol.eval_interval != 0 {
            return Err(CoreError::Data(format!(
                "curve iteration {iter} is not a multiple of eval_interval {}",
                protocol.eval_interval
            )));
        }
        if let Some(p) = prev {
            if iter <= p {
                return Err(CoreError::Data(
                    "curve iterations must be strictly increasing".into(),
                ));
            }
        }
        prev = Some(iter);
    }

    let (mut best_iter, mut best_nap) = curve[0];
    for (idx, &(iter, nap)) in curve.iter().enumerate().skip(1) {
        if nap > best_nap {
            best_nap = nap;
            best_iter = iter;
        } else if iter - best_iter >= protocol.patience {
            return Ok(SpeedReport {
                curve: curve[..=idx].to_vec(),
                best_nap,
                convergence_iteration: best_iter,
                budget_exhausted: false,
            });
        }
    }
    Ok(SpeedReport {
        curve: curve.to_vec(),
        best_nap,
        convergence_iteration: best_iter,
        budget_exhausted: true,
    })
}

/// Drive a training run under the speed protocol.
///
/// `run` receives the eval interval, the iteration budget and a callback; it
/// must invoke the callback with `(iteration, novel AP)` at every evaluation
/// point and stop early when the callback returns `true`. Composition with a
/// stub that replays a fixed curve reproduces `detect_convergence` exactly.
pub fn measure_adaptation_speed<F>(protocol: &SpeedProtocol, run: F) -> Result<SpeedReport>
where
    F: FnOnce(u64, u64, &mut dyn FnMut(u64, f64) -> bool) -> Result<()>,
{
    protocol.validate()?;
    let mut curve: Vec<(u64, f64)> = Vec::new();
    {
        let mut on_eval = |iteration: u64, nap: f64| -> bool {
            curve.push((iteration, nap));
            match detect_convergence(&curve, protocol) {
                Ok(report) => !report.budget_exhausted,
                Err(_) => false,
            }
        };
        run(protocol.eval_interval, protocol.max_budget, &mut on_eval)?;
    }
    detect_convergence(&curve, protocol)
}

/// One entry of an architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        name: String,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    /// Marks the transition to per-proposal computation; spatial dimensions
    /// below this point are the RoI pooling resolution.
    RoiStage { pooled_h: usize, pooled_w: usize },
}

/// Static description of the network for analytic FLOPs accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub layers: Vec<LayerDesc>,
    /// (height, width, channels)
    pub input_size: (usize, usize, usize),
    pub proposal_cap_train: usize,
    pub proposal_cap_infer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsPhase {
    TrainForward,
    Inference,
}

impl std::fmt::Display for FlopsPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FlopsPhase::TrainForward => write!(f, "train_forward"),
            FlopsPhase::Inference => write!(f, "inference"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub phase: FlopsPhase,
    pub total: u64,
    pub layers: Vec<LayerFlops>,
    pub proposal_cap: usize,
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(CoreError::Config(
            "conv layer does not fit its input".into(),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Analytic FLOPs for one feed-forward pass: convolutions count
/// `2*k^2*C_in*C_out` per output element, linear layers `2*in*out`, and every
/// layer after the RoI stage marker is multiplied by the phase's proposal
/// cap. Activations, NMS and the RoI-align arithmetic are ignored.
pub fn estimate_flops(arch: &ArchDescriptor, phase: FlopsPhase) -> Result<FlopsReport> {
    let markers = arch
        .layers
        .iter()
        .filter(|l| matches!(l, LayerDesc::RoiStage { .. }))
        .count();
    if markers != 1 {
        return Err(CoreError::Config(format!(
            "descriptor must contain exactly one roi stage marker, found {markers}"
        )));
    }
    let cap = match phase {
        FlopsPhase::TrainForward => arch.proposal_cap_train,
        FlopsPhase::Inference => arch.proposal_cap_infer,
    };

    let (mut h, mut w, mut ch) = arch.input_size;
    let mut per_proposal = false;
    let mut layers = Vec::new();
    let mut total: u64 = 0;

    for layer in &arch.layers {
        match layer {
            LayerDesc::RoiStage { pooled_h, pooled_w } => {
                per_proposal = true;
                h = *pooled_h;
                w = *pooled_w;
            }
            LayerDesc::Conv {
                name,
                kernel,
                in_ch,
                out_ch,
                stride,
                padding,
            } => {
                if *in_ch != ch {
                    return Err(CoreError::Config(format!(
                        "layer {name}: expected {ch} input channels, descriptor says {in_ch}"
                    )));
                }
                let oh = conv_out(h, *kernel, *stride, *padding)?;
                let ow = conv_out(w, *kernel, *stride, *padding)?;
                let per_elem = 2 * kernel * kernel * in_ch * out_ch;
                let mut flops = (per_elem * oh * ow) as u64;
                if per_proposal {
                    flops *= cap as u64;
                }
                total += flops;
                layers.push(LayerFlops {
                    name: name.clone(),
                    flops,
                });
                h = oh;
                w = ow;
                ch = *out_ch;
            }
            LayerDesc::Linear {
                name,
                in_features,
                out_features,
            } => {
                let mut flops = (2 * in_features * out_features) as u64;
                if per_proposal {
                    flops *= cap as u64;
                }
                total += flops;
                layers.push(LayerFlops {
                    name: name.clone(),
                    flops,
                });
            }
        }
    }

    Ok(FlopsReport {
        phase,
        total,
        layers,
        proposal_cap: cap,
    })
}

/// Median of a sample; mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn write_speed_csv(report: &SpeedReport, path: &std::path::Path) -> Result<()> {
    let mut s = String::from("iteration,nAP\n");
    for (iter, nap) in &report.curve {
        s.push_str(&format!("{iter},{nap:.6}\n"));
    }
    std::fs::write(path, s).map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto(interval: u64, patience: u64) -> SpeedProtocol {
        SpeedProtocol {
            eval_interval: interval,
            patience,
            max_budget: 10_000,
        }
    }

    fn curve(points: &[(u64, f64)]) -> Vec<(u64, f64)> {
        points.to_vec()
    }

    #[test]
    fn convergence_hand_traced_example() {
        let c = curve(&[(200, 0.05), (400, 0.10), (600, 0.10), (800, 0.09), (1000, 0.10)]);
        let r = detect_convergence(&c, &proto(200, 600)).unwrap();
        assert_eq!(r.convergence_iteration, 400);
        assert!(!r.budget_exhausted);
        assert_eq!(r.best_nap, 0.10);
    }

    #[test]
    fn convergence_strictly_increasing_exhausts_budget() {
        let c = curve(&[(200, 0.1), (400, 0.2), (600, 0.3), (800, 0.4)]);
        let r = detect_convergence(&c, &proto(200, 600)).unwrap();
        assert!(r.budget_exhausted);
        assert_eq!(r.convergence_iteration, 800);
    }

    #[test]
    fn convergence_constant_curve_ties_do_not_surpass() {
        let c = curve(&[(200, 0.3), (400, 0.3), (600, 0.3), (800, 0.3)]);
        let r = detect_convergence(&c, &proto(200, 600)).unwrap();
        assert_eq!(r.convergence_iteration, 200);
        assert!(!r.budget_exhausted);
    }

    #[test]
    fn convergence_empty_curve_is_error() {
        assert!(detect_convergence(&[], &proto(200, 600)).is_err());
    }

    #[test]
    fn convergence_result_stable_after_fire() {
        let mut c = curve(&[(200, 0.3), (400, 0.3), (600, 0.3), (800, 0.3)]);
        let before = detect_convergence(&c, &proto(200, 600)).unwrap();
        c.push((1000, 0.9)); // after the rule fired
        let after = detect_convergence(&c, &proto(200, 600)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn convergence_rejects_misaligned_iterations() {
        let c = curve(&[(150, 0.3)]);
        assert!(detect_convergence(&c, &proto(200, 600)).is_err());
    }

    #[test]
    fn measure_speed_matches_detect_on_stub_replay() {
        let fixed = curve(&[(50, 0.1), (100, 0.25), (150, 0.25), (200, 0.2), (250, 0.25), (300, 0.2)]);
        let protocol = proto(50, 150);
        let replay = fixed.clone();
        let measured = measure_adaptation_speed(&protocol, move |_interval, _budget, on_eval| {
            for (iter, nap) in replay {
                if on_eval(iter, nap) {
                    break;
                }
            }
            Ok(())
        })
        .unwrap();
        let direct = detect_convergence(&fixed, &protocol).unwrap();
        assert_eq!(measured, direct);
    }

    #[test]
    fn flops_hand_counted_conv() {
        // 3x3 conv, 1->1 channels, 4x4 input, stride 1, pad 1: 2*9*16 = 288.
        let arch = ArchDescriptor {
            layers: vec![
                LayerDesc::Conv {
                    name: "c".into(),
                    kernel: 3,
                    in_ch: 1,
                    out_ch: 1,
                    stride: 1,
                    padding: 1,
                },
                LayerDesc::RoiStage {
                    pooled_h: 1,
                    pooled_w: 1,
                },
            ],
            input_size: (4, 4, 1),
            proposal_cap_train: 1,
            proposal_cap_infer: 1,
        };
        let rep = estimate_flops(&arch, FlopsPhase::Inference).unwrap();
        assert_eq!(rep.total, 288);
    }

    #[test]
    fn flops_hand_counted_per_proposal_linear() {
        // linear 64->13 after the marker with cap 32: 2*64*13*32 = 53248.
        let arch = ArchDescriptor {
            layers: vec![
                LayerDesc::RoiStage {
                    pooled_h: 1,
                    pooled_w: 1,
                },
                LayerDesc::Linear {
                    name: "cls".into(),
                    in_features: 64,
                    out_features: 13,
                },
            ],
            input_size: (4, 4, 1),
            proposal_cap_train: 32,
            proposal_cap_infer: 64,
        };
        let rep = estimate_flops(&arch, FlopsPhase::TrainForward).unwrap();
        assert_eq!(rep.total, 53_248);
        assert_eq!(rep.proposal_cap, 32);
    }

    #[test]
    fn flops_total_is_sum_of_layers() {
        let arch = ArchDescriptor {
            layers: vec![
                LayerDesc::Conv {
                    name: "a".into(),
                    kernel: 3,
                    in_ch: 1,
                    out_ch: 4,
                    stride: 2,
                    padding: 1,
                },
                LayerDesc::RoiStage {
                    pooled_h: 2,
                    pooled_w: 2,
                },
                LayerDesc::Linear {
                    name: "b".into(),
                    in_features: 16,
                    out_features: 8,
                },
            ],
            input_size: (8, 8, 1),
            proposal_cap_train: 4,
            proposal_cap_infer: 8,
        };
        for phase in [FlopsPhase::TrainForward, FlopsPhase::Inference] {
            let rep = estimate_flops(&arch, phase).unwrap();
            assert_eq!(rep.total, rep.layers.iter().map(|l| l.flops).sum::<u64>());
        }
    }

    #[test]
    fn flops_doubling_cap_doubles_post_marker_subtotal() {
        let mk = |cap| ArchDescriptor {
            layers: vec![
                LayerDesc::Conv {
                    name: "pre".into(),
                    kernel: 1,
                    in_ch: 1,
                    out_ch: 1,
                    stride: 1,
                    padding: 0,
                },
                LayerDesc::RoiStage {
                    pooled_h: 1,
                    pooled_w: 1,
                },
                LayerDesc::Linear {
                    name: "post".into(),
                    in_features: 10,
                    out_features: 10,
                },
            ],
            input_size: (4, 4, 1),
            proposal_cap_train: cap,
            proposal_cap_infer: cap,
        };
        let r1 = estimate_flops(&mk(16), FlopsPhase::Inference).unwrap();
        let r2 = estimate_flops(&mk(32), FlopsPhase::Inference).unwrap();
        let post = |r: &FlopsReport| r.layers.iter().find(|l| l.name == "post").unwrap().flops;
        let pre = |r: &FlopsReport| r.layers.iter().find(|l| l.name == "pre").unwrap().flops;
        assert_eq!(post(&r2), 2 * post(&r1));
        assert_eq!(pre(&r2), pre(&r1));
    }

    #[test]
    fn flops_missing_marker_is_error() {
        let arch = ArchDescriptor {
            layers: vec![LayerDesc::Linear {
                name: "l".into(),
                in_features: 4,
                out_features: 4,
            }],
            input_size: (4, 4, 1),
            proposal_cap_train: 1,
            proposal_cap_infer: 1,
        };
        assert!(estimate_flops(&arch, FlopsPhase::Inference).is_err());
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
