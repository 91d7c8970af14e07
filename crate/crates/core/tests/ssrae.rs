use farmamba_core::autodiff::Graph;
use farmamba_core::encoder::{Encoder, EncoderConfig};
use farmamba_core::layers::{Binding, Init};
use farmamba_core::losses::recon_loss;
use farmamba_core::msfm::{MsfmConfig, Variant};
use farmamba_core::oracle::rand_tensor;
use farmamba_core::ssrae::{
    area_downscale, binomial_blur, degrade, tie_weights, DegradeConfig, RegionAttention, RegionMask, Ssrae,
    SsraeConfig,
};
use farmamba_core::{ParamTree, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn degrade_noise_statistics() {
    let x = rand_tensor(&[4, 1, 2000, 500], 1);
    let cfg = DegradeConfig::default();
    let out = degrade(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(out.shape(), &[4, 1, 500, 125]);
    let clean = binomial_blur(&area_downscale(&x, 4).unwrap());
    let noise: Vec<f64> = out.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    let n = noise.len() as f64;
    assert!(n >= 2.5e5);

    // a second draw reaches 10^6 samples in total
    let big = rand_tensor(&[1, 1, 4000, 4000], 3);
    let out = degrade(&big, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let clean = binomial_blur(&area_downscale(&big, 4).unwrap());
    let noise: Vec<f64> = noise
        .into_iter()
        .chain(out.data().iter().zip(clean.data()).map(|(a, b)| a - b))
        .collect();
    let n = noise.len() as f64;
    assert!(n >= 1e6);
    let mean = noise.iter().sum::<f64>() / n;
    let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 3.0 * 0.01 / n.sqrt(), "mean {mean}");
    assert!((std / 0.01 - 1.0).abs() <= 0.02, "std {std}");
}

#[test]
fn degrade_is_deterministic_per_seed() {
    let x = rand_tensor(&[2, 3, 16, 16], 5);
    let cfg = DegradeConfig::default();
    let a = degrade(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let b = degrade(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let c = degrade(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn degrade_rejects_indivisible_extents() {
    let x = rand_tensor(&[1, 1, 10, 8], 8);
    assert!(degrade(&x, &DegradeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

fn attention(dim: usize, heads: usize, seed: u64) -> (RegionAttention, ParamTree<f64>) {
    let att = RegionAttention::new("att", dim, heads).unwrap();
    let mut tree = ParamTree::new();
    att.init_params(&mut tree, &Init::new(seed)).unwrap();
    // give the zero-initialized output projection some weight
    let s = tree.get("att.out.w").unwrap().shape().to_vec();
    tree.set("att.out.w", rand_tensor(&s, seed + 1));
    (att, tree)
}

fn attend(att: &RegionAttention, tree: &ParamTree<f64>, x: &Tensor<f64>, mask: &RegionMask) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let p = Binding::frozen(&mut g, tree);
    let xv = g.constant(x.clone());
    let (y, a) = att.forward(&mut g, &p, xv, mask).unwrap();
    (g.value(y).clone(), g.value(a).clone())
}

#[test]
fn cross_region_weights_vanish() {
    let (att, tree) = attention(8, 2, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let labels: Vec<usize> = (0..2 * 36).map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
        let mask = RegionMask::from_labels(&labels, 2, 6, 6, 6, 6).unwrap();
        let x = rand_tensor(&[2, 36, 8], 12).scale(20.0);
        let (_, a) = attend(&att, &tree, &x, &mask);
        let l = 36;
        for b in 0..2 {
            for h in 0..2 {
                for i in 0..l {
                    for j in 0..l {
                        if mask.labels[b * l + i] != mask.labels[b * l + j] {
                            assert!(a.at(&[b, h, i, j]) < 1e-8);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn distinct_regions_reduce_to_value_projection() {
    let (att, tree) = attention(4, 2, 20);
    let labels: Vec<usize> = (0..9).collect();
    let mask = RegionMask::from_labels(&labels, 1, 3, 3, 3, 3).unwrap();
    let x = rand_tensor(&[1, 9, 4], 21);
    let (y, a) = attend(&att, &tree, &x, &mask);
    for h in 0..2 {
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(a.at(&[0, h, i, j]), if i == j { 1.0 } else { 0.0 });
            }
        }
    }
    let mut g = Graph::new();
    let p = Binding::frozen(&mut g, &tree);
    let xv = g.constant(x);
    let v = att.proj("v").forward(&mut g, &p, xv).unwrap();
    let want = att.proj("out").forward(&mut g, &p, v).unwrap();
    assert!(y.max_abs_diff(g.value(want)) <= 1e-12);
}

#[test]
fn single_region_is_plain_attention() {
    let (att, tree) = attention(6, 3, 30);
    let x = rand_tensor(&[2, 12, 6], 31);
    let one = RegionMask::from_labels(&[4; 24], 2, 3, 4, 3, 4).unwrap();
    let (y, a) = attend(&att, &tree, &x, &one);

    // direct softmax(QKᵀ/√d) V per head
    let mut g = Graph::new();
    let p = Binding::frozen(&mut g, &tree);
    let xv = g.constant(x);
    let [q, k, v] = ["q", "k", "v"].map(|w| {
        let y = att.proj(w).forward(&mut g, &p, xv).unwrap();
        g.value(y).clone()
    });
    let (dh, l) = (2, 12);
    let mut heads_out = Tensor::zeros(vec![2, 12, 6]);
    for b in 0..2 {
        for h in 0..3 {
            for i in 0..l {
                let logits: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|d| q.at(&[b, i, h * dh + d]) * k.at(&[b, j, h * dh + d])).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                for j in 0..l {
                    let w = (logits[j] - m).exp() / z;
                    assert!((a.at(&[b, h, i, j]) - w).abs() <= 1e-12);
                    for d in 0..dh {
                        let cur = heads_out.at(&[b, i, h * dh + d]);
                        heads_out.set(&[b, i, h * dh + d], cur + w * v.at(&[b, j, h * dh + d]));
                    }
                }
            }
        }
    }
    let hv = g.constant(heads_out);
    let want = att.proj("out").forward(&mut g, &p, hv).unwrap();
    assert!(y.max_abs_diff(g.value(want)) <= 1e-12);
}

#[test]
fn mask_length_mismatch_is_an_error() {
    let (att, tree) = attention(4, 1, 40);
    let mask = RegionMask::from_labels(&[0; 16], 1, 4, 4, 2, 2).unwrap();
    let mut g = Graph::new();
    let p = Binding::frozen(&mut g, &tree);
    let xv = g.constant(rand_tensor(&[1, 9, 4], 41));
    assert!(att.forward(&mut g, &p, xv, &mask).is_err());
}

fn main_encoder() -> Encoder {
    let cfg = EncoderConfig {
        depths: vec![1, 1],
        state_dim: 4,
        msfm: Some(MsfmConfig::new(Variant::Dwt, 8)),
        ..EncoderConfig::new(8, 3)
    };
    Encoder::new("enc", cfg).unwrap()
}

fn labels(b: usize, h: usize, w: usize) -> Vec<usize> {
    (0..b * h * w).map(|i| ((i % w) * 3 / w + (i / w % h) / 8) % 3).collect()
}

#[test]
fn reconstruction_matches_target_shape_and_spares_the_main_encoder() {
    let enc = main_encoder();
    let aux = Ssrae::new("ssrae", SsraeConfig::default(), &enc).unwrap();
    assert_eq!(aux.input_multiple(), 16);
    let mut tree = ParamTree::<f64>::new();
    enc.init_params(&mut tree, &Init::new(1), 2).unwrap();
    aux.init_params(&mut tree, &Init::new(1)).unwrap();

    let image = rand_tensor(&[2, 3, 32, 32], 50);
    let lab = labels(2, 32, 32);
    let degraded = degrade(&image, &aux.cfg.degrade, &mut ChaCha8Rng::seed_from_u64(51)).unwrap();

    let mut g = Graph::new();
    let p = Binding::trainable(&mut g, &tree);
    let x = g.constant(image);
    let main = enc.encode(&mut g, &p, x, 2).unwrap();
    let target = g.detach(main.stages[0]);
    let d = g.constant(degraded);
    let pred = aux.reconstruct_features(&mut g, &p, d, &lab, (32, 32)).unwrap();
    assert_eq!(g.shape(pred), g.shape(target));
    assert_eq!(g.shape(pred), &[2, 8, 8, 8]);

    let loss = recon_loss(&mut g, pred, target, 1.0, 0.5, 0.5).unwrap();
    let grads = p.grads(&g.backward(loss).unwrap(), &tree);
    let mut reached_aux = false;
    for (name, gr) in grads.iter() {
        if name.starts_with("enc.") {
            assert_eq!(gr.max_abs(), 0.0, "{name}");
        } else if name.starts_with("ssrae.enc.") && gr.max_abs() > 0.0 {
            reached_aux = true;
        }
    }
    assert!(reached_aux);
}

#[test]
fn copied_weights_on_clean_input_reconstruct_exactly() {
    let enc = main_encoder();
    let cfg = SsraeConfig {
        degrade: DegradeConfig {
            downscale: 1,
            sigma_noise: 0.0,
        },
        ..SsraeConfig::default()
    };
    let aux = Ssrae::new("ssrae", cfg, &enc).unwrap();
    let mut tree = ParamTree::<f64>::new();
    enc.init_params(&mut tree, &Init::new(2), 1).unwrap();
    aux.init_params(&mut tree, &Init::new(3)).unwrap();
    let copied = tie_weights(&mut tree, "enc", &aux);
    assert!(copied > 0);
    // head = identity, so the (zero-initialized) attention residual passes through
    tree.set("ssrae.head.w", {
        let mut t = Tensor::zeros(vec![8, 8]);
        for i in 0..8 {
            t.set(&[i, i], 1.0);
        }
        t
    });

    let image = rand_tensor(&[1, 3, 16, 16], 60);
    // degradation disabled: the auxiliary branch sees the clean image
    let degraded = image.clone();
    let mut g = Graph::new();
    let p = Binding::frozen(&mut g, &tree);
    let x = g.constant(image);
    let target = enc.encode(&mut g, &p, x, 1).unwrap().stages[0];
    let d = g.constant(degraded);
    let pred = aux.reconstruct_features(&mut g, &p, d, &labels(1, 16, 16), (16, 16)).unwrap();
    let l1 = recon_loss(&mut g, pred, target, 1.0, 0.0, 0.0).unwrap();
    assert!(g.value(l1).item() <= 1e-12);
}

#[test]
fn tied_weights_share_the_main_encoder() {
    let enc = main_encoder();
    let cfg = SsraeConfig {
        tie_weights: true,
        ..SsraeConfig::default()
    };
    let aux = Ssrae::new("ssrae", cfg, &enc).unwrap();
    let mut tree = ParamTree::<f64>::new();
    aux.init_params(&mut tree, &Init::new(4)).unwrap();
    assert!(tree.names().all(|n| !n.starts_with("ssrae.enc.")));
    assert_eq!(aux.encoder.prefix, "enc");

    let bad = SsraeConfig {
        target_stage: 3,
        ..SsraeConfig::default()
    };
    assert!(Ssrae::new("ssrae", bad, &enc).is_err());
}
