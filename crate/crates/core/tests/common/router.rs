//! A straightforward simulation of the skip semantics and an exhaustive
//! comparison of the router against it.

use resroute::arch::ArchConfig;
use resroute::cost::{Accounting, CostModel};
use resroute::data::{generate, prepare, DatasetSpec, PreparedVideo, Split};
use resroute::params::{ModelKind, ParamSet};
use resroute::router::{Decider, PolicyAction, Router};
use resroute::tensor::Graph;
use resroute::train::init_model;

pub const T: usize = 4;

/// What the simulation says about one frame.
#[derive(Debug, PartialEq)]
pub struct Expect {
    pub observed: bool,
    pub action: Option<usize>,
    pub skipped_by: Option<usize>,
    pub level: Option<usize>,
}

pub fn simulate(seq: &[usize], levels: usize, skips: &[usize]) -> Vec<Expect> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < seq.len() {
        let a = seq[t];
        if a < levels {
            out.push(Expect {
                observed: true,
                action: Some(a),
                skipped_by: None,
                level: Some(a),
            });
            t += 1;
        } else {
            let n = skips[a - levels];
            out.push(Expect {
                observed: true,
                action: Some(a),
                skipped_by: None,
                level: None,
            });
            for _ in 1..n {
                if out.len() == seq.len() {
                    break;
                }
                out.push(Expect {
                    observed: false,
                    action: None,
                    skipped_by: Some(t),
                    level: None,
                });
            }
            t += n;
        }
    }
    out
}

fn fixtures() -> (ArchConfig, ParamSet, CostModel, Vec<PreparedVideo>) {
    let arch = ArchConfig::default();
    let spec = DatasetSpec {
        frames: T,
        run_length: T,
        events: (1, 1),
        train_per_class: 1,
        val_per_class: 0,
        test_per_class: 0,
        ..DatasetSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let videos = prepare(ds.split(Split::Train).take(2), &arch.ladder).unwrap();
    let params = init_model(ModelKind::Arnet, &arch, 5).unwrap();
    let costs = CostModel::paper(&arch).unwrap();
    (arch, params, costs, videos)
}

fn sequences(k: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..k.pow(T as u32)).map(move |mut code| {
        (0..T)
            .map(|_| {
                let a = code % k;
                code /= k;
                a
            })
            .collect()
    })
}

/// Runs every forced sequence on two videos; panics on the first mismatch
/// and returns the number of sequences checked.
pub fn check_all_sequences() -> usize {
    let (arch, params, costs, videos) = fixtures();
    let k = arch.num_actions();
    let (levels, skips) = (arch.levels(), arch.skips.clone());
    let level_cost = costs.level_gflops().to_vec();
    let mut checked = 0;
    for video in &videos {
        for seq in sequences(k) {
            let g = Graph::new();
            let bound = params.bind(&g, |_| false).unwrap();
            let router = Router {
                arch: &arch,
                params: &bound,
                costs: &costs,
                mask: None,
            };
            let out = router
                .run_video(&video.leveled, &mut Decider::Forced(&seq))
                .unwrap();
            let trace = &out.trace;
            let expect = simulate(&seq, levels, &skips);

            // Coverage: one record per frame, in order.
            assert_eq!(trace.frames.len(), T, "{seq:?}");
            for (t, (f, e)) in trace.frames.iter().zip(&expect).enumerate() {
                assert_eq!(f.t, t);
                assert_eq!(f.observed, e.observed, "{seq:?} frame {t}");
                assert_eq!(f.action_index, e.action, "{seq:?} frame {t}");
                assert_eq!(f.skipped_by, e.skipped_by, "{seq:?} frame {t}");
                assert_eq!(f.levels, e.level.into_iter().collect::<Vec<_>>());
                assert_eq!(f.predicted, e.level.is_some());
                assert!(!f.policy_ran);
                match f.action {
                    Some(PolicyAction::Resolution(l)) => assert_eq!(Some(l), e.level),
                    Some(PolicyAction::Skip(n)) => {
                        assert_eq!(Some(n), e.action.map(|a| skips[a - levels]))
                    }
                    None => assert!(!e.observed),
                }
            }

            // Prediction count and fallback.
            let n_pred = expect.iter().filter(|e| e.level.is_some()).count();
            assert_eq!(trace.predicted_frames(), n_pred, "{seq:?}");
            assert_eq!(trace.fallback, n_pred == 0, "{seq:?}");
            assert_eq!(out.prediction.numel(), arch.num_classes);
            if n_pred > 0 {
                let mut sum = vec![0.0; arch.num_classes];
                for f in trace.frames.iter().filter(|f| f.predicted) {
                    for (s, v) in sum.iter_mut().zip(f.logits.as_ref().unwrap()) {
                        *s += v;
                    }
                }
                for (p, s) in out.prediction.value().iter().zip(&sum) {
                    assert!((p - s / n_pred as f64).abs() < 1e-12, "{seq:?}");
                }
            }

            // Cost additivity, in frame order as the model sums it.
            let mut total = 0.0;
            for e in &expect {
                if let Some(l) = e.level {
                    total += level_cost[l];
                }
            }
            for acc in [Accounting::Paper, Accounting::Full] {
                let r = costs.video_cost(trace, acc).unwrap();
                assert_eq!(r.gflops_per_video, total, "{seq:?}");
                assert_eq!(r.gflops_per_frame, total / T as f64);
            }
            let frame_costs: f64 = trace.frames.iter().map(|f| f.cost_flops).sum();
            assert_eq!(frame_costs, total, "{seq:?}");

            // Usage: each frame attributed to the decision covering it.
            let mut usage = vec![0.0; k];
            for (t, e) in expect.iter().enumerate() {
                let a = e.action.or_else(|| e.skipped_by.and_then(|s| expect[s].action));
                usage[a.unwrap_or_else(|| panic!("frame {t} unattributed"))] += 1.0;
            }
            usage.iter_mut().for_each(|u| *u /= T as f64);
            assert_eq!(trace.hard_usage(k), usage, "{seq:?}");
            checked += 1;
        }
    }
    checked
}
