use nucleo_core::gradcheck::random_tensor;
use nucleo_core::loss;
use nucleo_core::models::{checkpoint, Network, UpStage};
use nucleo_core::nn::{Session, Sharing};
use nucleo_core::{Mode, Model, ModelKind, ModelSpec, Task, Tensor};

#[test]
fn dcrn_and_densenet_have_equal_parameter_counts() {
    let dcrn = Model::<f32>::build(&ModelSpec::reference(ModelKind::Dcrn), 0).unwrap();
    let dense = Model::<f32>::build(&ModelSpec::reference(ModelKind::DenseNet), 0).unwrap();
    assert_eq!(dcrn.spec.sharing, Sharing::Shared);
    assert_eq!(dcrn.param_count(), dense.param_count());
    for t in [1, 3] {
        let other = Model::<f32>::build(&ModelSpec::reference(ModelKind::Dcrn).with_t(t), 0).unwrap();
        assert_eq!(other.param_count(), dense.param_count());
    }
    println!("dcrn/densenet learnables: {}", dcrn.param_count());
}

#[test]
fn per_step_udnet_exceeds_r2unet() {
    let r2 = Model::<f32>::build(&ModelSpec::reference(ModelKind::R2UNet), 0).unwrap();
    let ud = Model::<f32>::build(&ModelSpec::reference(ModelKind::UdNet), 0).unwrap();
    assert_eq!((r2.spec.t, ud.spec.t), (2, 3));
    assert_eq!(r2.spec.channel_plan, ud.spec.channel_plan);
    assert!(ud.param_count() > r2.param_count());
    println!(
        "r2unet (per-step, t=2): {} learnables ({:.3}M; reference figure 0.845M)",
        r2.param_count(),
        r2.param_count() as f64 / 1e6
    );
    println!("udnet (per-step, t=3): {} learnables", ud.param_count());
}

#[test]
fn r2unet_output_is_a_probability_map() {
    let mut m = Model::<f64>::build(&ModelSpec::reference(ModelKind::R2UNet), 5).unwrap();
    let x = random_tensor(&[1, 1, 64, 64], 0.0, 1.0, 1);
    let updates = {
        let mut s = Session::new(&m.store, Mode::Train);
        let xv = s.input(x.clone());
        m.forward(&mut s, xv).unwrap();
        s.into_stat_updates()
    };
    m.store.apply_bn_updates(&updates, 0.0);
    for mode in [Mode::Train, Mode::Eval] {
        let mut s = Session::new(&m.store, mode);
        let xv = s.input(x.clone());
        let y = m.forward(&mut s, xv).unwrap();
        let y = s.graph.value(y);
        let (lo, hi) = y.data().iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        println!("{mode:?}: output range [{lo:e}, {hi}]");
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0), "{mode:?}");
    }
}

#[test]
fn unet_output_extent_follows_input() {
    let spec = ModelSpec::reference(ModelKind::UdNet).with_plan(&[1, 4, 8, 16, 8, 4, 1]);
    let m = Model::<f32>::build(&spec, 0).unwrap();
    for (h, w) in [(4, 4), (8, 12), (20, 16)] {
        let y = m.predict(&Tensor::ones(vec![1, 1, h, w])).unwrap();
        assert_eq!(y.shape(), &[1, 1, h, w]);
    }
}

#[test]
fn eval_forward_is_deterministic() {
    for kind in [ModelKind::Dcrn, ModelKind::R2UNet] {
        let mut spec = ModelSpec::reference(kind);
        if kind.is_unet() {
            spec = spec.with_plan(&[1, 4, 8, 4, 1]);
        }
        let m = Model::<f32>::build(&spec, 2).unwrap();
        let x = random_tensor(&[2, spec.in_channels, 16, 16], 0.0, 1.0, 3).cast();
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn tiny_r2unet_matches_hand_composition() {
    let spec = ModelSpec::reference(ModelKind::R2UNet).with_plan(&[1, 4, 8, 4, 1]);
    let m = Model::<f64>::build(&spec, 8).unwrap();
    let Network::UNet(u) = &m.net else { panic!("expected a U-Net") };
    let x = random_tensor(&[2, 1, 8, 8], 0.0, 1.0, 4);
    for mode in [Mode::Train, Mode::Eval] {
        let mut s = Session::new(&m.store, mode);
        let xv = s.input(x.clone());
        let got = m.forward(&mut s, xv).unwrap();
        let got = s.graph.value(got).clone();

        let mut r = Session::new(&m.store, mode);
        let xv = r.input(x.clone());
        let e0 = u.encoder[0].forward(&mut r, xv).unwrap();
        let p = r.graph.max_pool2(e0).unwrap();
        let e1 = u.encoder[1].forward(&mut r, p).unwrap();
        let (up, dec) = &u.decoder[0];
        let UpStage::Transpose(upconv) = up else { panic!("default upsampling is transposed conv") };
        let uv = upconv.forward(&mut r, e1).unwrap();
        assert_eq!(r.graph.shape(uv), &[2, 4, 8, 8]);
        let cat = r.graph.concat(&[e0, uv]).unwrap();
        let d = dec.forward(&mut r, cat).unwrap();
        let o = u.out_conv.forward(&mut r, d).unwrap();
        let want = r.graph.sigmoid(o);
        assert_eq!(&got, r.graph.value(want));
    }
}

fn small_spec(kind: ModelKind) -> (ModelSpec, Vec<usize>) {
    match kind {
        ModelKind::Dcrn | ModelKind::DenseNet => {
            let mut s = ModelSpec::reference(kind);
            s.blocks = 2;
            s.layers_per_block = 2;
            s.growth_rate = 3;
            s.stem_channels = 4;
            (s, vec![4, 3, 8, 8])
        }
        _ => (ModelSpec::reference(kind).with_plan(&[1, 4, 8, 4, 1]), vec![2, 1, 8, 8]),
    }
}

#[test]
fn every_parameter_receives_a_gradient() {
    for kind in [ModelKind::DenseNet, ModelKind::Dcrn, ModelKind::R2UNet, ModelKind::UdNet] {
        let (spec, shape) = small_spec(kind);
        let m = Model::<f64>::build(&spec, 1).unwrap();
        let x = random_tensor(&shape, 0.0, 1.0, 2);
        let mut s = Session::new(&m.store, Mode::Train);
        let xv = s.input(x);
        let y = m.forward(&mut s, xv).unwrap();
        let l = match spec.task {
            Task::Classification => loss::cross_entropy(&mut s.graph, y, &[0, 1, 2, 3]).unwrap(),
            Task::Segmentation => {
                let t = random_tensor(&[2, 1, 8, 8], 0.0, 1.0, 3).map(|v| (v > 0.5) as u8 as f64);
                let t = s.graph.constant(t);
                loss::soft_dice_loss(&mut s.graph, y, t).unwrap()
            }
            Task::Detection => {
                let t = s.graph.constant(random_tensor(&[2, 1, 8, 8], 0.0, 0.1, 3));
                loss::mse(&mut s.graph, y, t).unwrap()
            }
        };
        let grads = s.backward(l).unwrap();
        let learnable: Vec<_> = m.store.ids().filter(|&id| m.store.get(id).kind.is_learnable()).collect();
        assert_eq!(grads.len(), learnable.len(), "{kind}");
        for (id, g) in grads {
            let e = m.store.get(id);
            assert!(g.is_finite(), "{}", e.name);
            // Biases directly before a train-mode BN have a zero gradient by
            // construction; everything else must be reached.
            let max = g.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let cancels = e.kind == nucleo_core::nn::ParamKind::Bias && feeds_batch_norm(&e.name);
            assert!(cancels || max > 0.0, "{kind}: {} has an all-zero gradient", e.name);
        }
    }
}

fn feeds_batch_norm(name: &str) -> bool {
    name.contains(".wf.") || name.contains("transition") || name.contains("conv1") || name.contains(".tr.")
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [ModelKind::Dcrn, ModelKind::UdNet] {
        let (spec, shape) = small_spec(kind);
        let mut m = Model::<f32>::build(&spec, 4).unwrap();
        let x = random_tensor(&shape, 0.0, 1.0, 5).cast::<f32>();
        {
            let mut s = Session::new(&m.store, Mode::Train);
            let xv = s.input(x.clone());
            m.forward(&mut s, xv).unwrap();
            let updates = s.into_stat_updates();
            m.store.apply_bn_updates(&updates, 0.9);
        }
        let before = m.predict(&x).unwrap();
        let path = dir.path().join(format!("{kind}.ckpt"));
        checkpoint::save(&m, &path).unwrap();
        let mut fresh = Model::<f32>::build(&spec, 99).unwrap();
        checkpoint::load_into(&mut fresh, &path).unwrap();
        for (a, b) in m.store.entries().iter().zip(fresh.store.entries()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let after = fresh.predict(&x).unwrap();
        assert!(before.data().iter().zip(after.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
