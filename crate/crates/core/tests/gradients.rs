use mixshare::gradcheck::{finite_diff_check, model_gradcheck, ModelCheck};
use mixshare::model::BnMode;
use mixshare::params::ParamStore;
use mixshare::tape::{BnStats, Tape, Var};
use mixshare::{InitMode, MimoConfig, Result, Rng, Tensor, UnmixMode};

const TOL: f64 = 1e-6;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t).unwrap();
    }
    s
}

/// Contracts `out` with a fixed random tensor so every output element
/// contributes a distinct weight to the scalar loss.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let shape = tape.value(out).shape().to_vec();
    let probe = tape.constant(randn(&shape, &mut rng));
    let prod = tape.mul(out, probe)?;
    Ok(tape.sum(prod))
}

fn check(params: &mut ParamStore, samples: usize, f: impl FnMut(&ParamStore, &mut Tape) -> Result<Var>) -> f64 {
    finite_diff_check(params, f, 1e-6, samples, &mut Rng::new(99)).unwrap()
}

#[test]
fn conv_stride_and_padding() {
    let mut rng = Rng::new(1);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut p = store(vec![("x", randn(&[2, 3, 6, 6], &mut rng)), ("w", randn(&[4, 3, 3, 3], &mut rng))]);
        let err = check(&mut p, 40, |p, t| {
            let x = t.param(0, p.get(0));
            let w = t.param(1, p.get(1));
            let y = t.conv2d(x, w, stride, pad)?;
            project(t, y, 7)
        });
        assert!(err < TOL, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn batchnorm_both_modes() {
    let mut rng = Rng::new(2);
    let mean = vec![0.3, -0.2, 0.1];
    let var = vec![1.5, 0.7, 2.0];
    for batch_mode in [true, false] {
        let mut p = store(vec![
            ("x", randn(&[4, 3, 3, 3], &mut rng)),
            ("gamma", randn(&[3], &mut rng)),
            ("beta", randn(&[3], &mut rng)),
        ]);
        let err = check(&mut p, 40, |p, t| {
            let x = t.param(0, p.get(0));
            let g = t.param(1, p.get(1));
            let b = t.param(2, p.get(2));
            let stats = if batch_mode {
                BnStats::Batch
            } else {
                BnStats::Fixed { mean: &mean, var: &var }
            };
            let (y, _) = t.batch_norm(x, g, b, stats)?;
            project(t, y, 8)
        });
        assert!(err < TOL, "batch mode {batch_mode}: {err}");
    }
}

#[test]
fn elementwise_pooling_and_linear() {
    let mut rng = Rng::new(3);
    let mut p = store(vec![
        ("a", randn(&[2, 3, 4, 4], &mut rng)),
        ("b", randn(&[2, 3, 4, 4], &mut rng)),
        ("w", randn(&[5, 3], &mut rng)),
        ("bias", randn(&[5], &mut rng)),
    ]);
    let err = check(&mut p, 60, |p, t| {
        let a = t.param(0, p.get(0));
        let b = t.param(1, p.get(1));
        let w = t.param(2, p.get(2));
        let bias = t.param(3, p.get(3));
        let s = t.add(a, b)?;
        let m = t.mul(s, a)?;
        let r = t.relu(m);
        let r = t.scale(r, 0.7);
        let pooled = t.global_avg_pool(r)?;
        let y = t.linear(pooled, w, Some(bias))?;
        project(t, y, 9)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn spatial_mask_partial_channels() {
    let mut rng = Rng::new(4);
    let mask: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.uniform()).collect();
    let mut p = store(vec![("x", randn(&[2, 5, 4, 4], &mut rng))]);
    let err = check(&mut p, 40, |p, t| {
        let x = t.param(0, p.get(0));
        let y = t.spatial_mask(x, mask.clone(), 2)?;
        project(t, y, 10)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn weighted_cross_entropy() {
    let mut rng = Rng::new(5);
    let mut p = store(vec![("logits", randn(&[4, 6], &mut rng))]);
    let err = check(&mut p, 24, |p, t| {
        let l = t.param(0, p.get(0));
        t.weighted_cross_entropy(l, &[0, 5, 2, 2], &[0.3, 1.7, 1.0, 0.0])
    });
    assert!(err < TOL, "{err}");
}

fn desk(unmix_mode: UnmixMode, init_mode: InitMode) -> MimoConfig {
    MimoConfig {
        num_classes: 4,
        unmix_mode,
        init_mode,
        ..MimoConfig::default()
    }
}

#[test]
fn full_model_every_unmix_mode() {
    for mode in [
        UnmixMode::None,
        UnmixMode::Full,
        UnmixMode::Partial { fraction: 0.25 },
        UnmixMode::Fadeout { end_epoch: 10 },
    ] {
        let err = model_gradcheck(
            &desk(mode, InitMode::Colinear),
            ModelCheck {
                samples: 20,
                seed: 11,
                ..ModelCheck::default()
            },
        )
        .unwrap();
        assert!(err < 1e-4, "{mode:?}: {err}");
    }
}

#[test]
fn full_model_running_statistics() {
    let err = model_gradcheck(
        &desk(UnmixMode::Full, InitMode::Independent),
        ModelCheck {
            samples: 20,
            batch: 2,
            seed: 12,
            bn_mode: BnMode::Running,
            ..ModelCheck::default()
        },
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
