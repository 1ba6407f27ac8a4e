use mixshare::mask::{self, MaskPair};
use mixshare::model::{BnMode, ForwardPass};
use mixshare::tape::Tape;
use mixshare::{MimoConfig, MimoModel, Rng, Tensor, UnmixMode};

/// Encode, mix, core, pool and classify with no unmixing code involved.
fn plain_pipeline(model: &MimoModel, x: &[Tensor], masks: &[MaskPair]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let a = tape.constant(x[0].clone());
    let b = tape.constant(x[1].clone());
    let mut pass = ForwardPass::new(model, model.params(), &mut tape, BnMode::Batch);
    let e0 = pass.encode(0, a).unwrap();
    let e1 = pass.encode(1, b).unwrap();
    let mixed = mask::mix(pass.tape(), &[e0, e1], Some(masks)).unwrap();
    let core = pass.core(mixed).unwrap();
    let l0 = pass.classify(0, core.features).unwrap();
    let l1 = pass.classify(1, core.features).unwrap();
    vec![tape.value(l0).data().to_vec(), tape.value(l1).data().to_vec()]
}

fn logits(model: &MimoModel, x: &[Tensor], masks: &[MaskPair], r: f64) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let (out, _) = model.forward_train(&mut tape, x, masks, r, BnMode::Batch).unwrap();
    out.logits.iter().map(|&l| tape.value(l).data().to_vec()).collect()
}

#[test]
fn none_and_faded_out_match_plain_pipeline_bit_for_bit() {
    let cfg = MimoConfig {
        num_classes: 4,
        ..MimoConfig::default()
    };
    let mut model = MimoModel::build(cfg.clone(), &mut Rng::new(77)).unwrap();
    let faded = MimoModel::build(
        MimoConfig {
            unmix_mode: UnmixMode::Fadeout { end_epoch: 10 },
            ..cfg
        },
        &mut Rng::new(77),
    )
    .unwrap();
    let mut rng = Rng::new(78);
    for name in ["classifier0.weight", "classifier1.weight"] {
        let t = model.params_mut().by_name_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    }
    let mut faded = faded;
    faded.load_state(&model.state().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>()).unwrap();

    for _ in 0..100 {
        let x = [
            Tensor::from_fn(&[2, 3, 32, 32], |_| rng.normal()),
            Tensor::from_fn(&[2, 3, 32, 32], |_| rng.normal()),
        ];
        let masks: Vec<MaskPair> = (0..2)
            .map(|_| {
                let lambda = mask::sample_mixing_ratio(&mut rng, 2.0).unwrap();
                mask::sample_cutmix_mask(32, 32, lambda, &mut rng).unwrap()
            })
            .collect();
        let reference = plain_pipeline(&model, &x, &masks);
        assert_eq!(logits(&model, &x, &masks, 0.0), reference);
        let r = faded.config().unmix_mode.fade(10 + rng.below(5));
        assert_eq!(r, 1.0);
        assert_eq!(logits(&faded, &x, &masks, r), reference);
    }
}
