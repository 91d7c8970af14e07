use farmamba::config::{AblationFlags, Precision};
use farmamba::model::Model;
use farmamba::trainer::{evaluate, load_for_eval, read_csv, train_on, EpochRow, Trainer, LAST_CKPT, LOSS_CSV, METRICS_CSV};
use farmamba::verify::small_run_config;
use farmamba::{Dataset, RunConfig};
use farmamba_core::ParamTree;

fn tiny(epochs: usize) -> (RunConfig, Dataset, Dataset) {
    let mut cfg = small_run_config();
    cfg.train.epochs = epochs;
    let (train, val) = cfg.data.synthetic.generate().unwrap();
    (cfg, train, val)
}

#[test]
fn segmentation_loss_falls_over_a_few_epochs() {
    let (mut cfg, train, val) = tiny(3);
    cfg.train.precision = Precision::F32;
    cfg.optim.lr = 5e-3;
    let o = train_on(&cfg, &train, &val, false).unwrap();
    let mean = |e: usize| {
        let s: Vec<f64> = o.steps.iter().filter(|r| r.epoch == e).map(|r| r.seg_loss).collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    assert!(mean(2) < mean(0), "epoch 0 {} vs epoch 2 {}", mean(0), mean(2));
    assert!(o.steps.iter().all(|r| r.total.is_finite()));
}

#[test]
fn reconstruction_term_is_exactly_zero_during_warmup() {
    let (mut cfg, train, val) = tiny(2);
    cfg.schedule.warmup = 2;
    let mut t = Trainer::<f64>::new(&cfg).unwrap();
    t.run(&train, &val).unwrap();
    assert!(t.model.ssrae.is_some());
    for r in &t.steps {
        assert_eq!(r.joint_weight, 0.0);
        assert_eq!(r.total, r.seg_loss);
    }
}

#[test]
fn auxiliary_branch_leaves_the_segmentation_path_untouched() {
    // targets are detached and weights untied, so the recon term only trains
    // the auxiliary encoder
    let (cfg, train, val) = tiny(4);
    let mut seg_only = cfg.clone();
    seg_only.ablation = AblationFlags::new(true, false, false);
    let full = train_on(&cfg, &train, &val, false).unwrap();
    let plain = train_on(&seg_only, &train, &val, false).unwrap();
    assert!(full.steps.iter().any(|r| r.recon_loss > 0.0 && r.joint_weight > 0.0));
    assert!(plain.steps.iter().all(|r| r.recon_loss == 0.0));
    let seg = |o: &farmamba::TrainOutcome| o.steps.iter().map(|r| r.seg_loss).collect::<Vec<_>>();
    assert_eq!(seg(&full), seg(&plain));
    assert_eq!(full.final_val.unwrap().dsc, plain.final_val.unwrap().dsc);
}

#[test]
fn resume_from_disk_matches_an_uninterrupted_run() {
    let (cfg, train, val) = tiny(4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut ca = cfg.clone();
    ca.output_dir = Some(a.path().to_path_buf());
    train_on(&ca, &train, &val, false).unwrap();

    let mut cb = cfg.clone();
    cb.output_dir = Some(b.path().to_path_buf());
    let mut t = Trainer::<f64>::new(&cb).unwrap();
    t.run_epoch(&train, &val).unwrap();
    t.run_epoch(&train, &val).unwrap();
    t.checkpoint().save(b.path().join(LAST_CKPT)).unwrap();
    farmamba::trainer::write_csv(&b.path().join(METRICS_CSV), &t.rows).unwrap();
    farmamba::trainer::write_csv(&b.path().join(LOSS_CSV), &t.steps).unwrap();
    drop(t);
    train_on(&cb, &train, &val, true).unwrap();

    for f in [METRICS_CSV, LOSS_CSV, LAST_CKPT] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs after resume");
    }
}

#[test]
fn saved_checkpoint_reproduces_the_logged_validation_score() {
    let (mut cfg, train, val) = tiny(2);
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(dir.path().join("run"));
    train_on(&cfg, &train, &val, false).unwrap();
    let rows: Vec<EpochRow> = read_csv(&dir.path().join("run").join(METRICS_CSV)).unwrap();
    let last = rows.iter().rev().find(|r| r.split == "val").unwrap();

    val.save(&dir.path().join("val")).unwrap();
    let reloaded = Dataset::load(&dir.path().join("val"), None).unwrap();
    let (cfg2, model, params) = load_for_eval(&dir.path().join("run").join(LAST_CKPT), None).unwrap();
    let r1 = params.evaluate(&model, &reloaded, &cfg2).unwrap();
    let r2 = params.evaluate(&model, &reloaded, &cfg2).unwrap();
    assert_eq!(r1.report, r2.report);
    assert_eq!(r1.report.dsc, last.dsc);
    assert_eq!(r1.report.miou, last.miou);
}

#[test]
fn zero_head_predicts_background_everywhere() {
    let (cfg, _, val) = tiny(1);
    let model = Model::new(&cfg).unwrap();
    let mut p: ParamTree<f64> = model.init_params(1).unwrap();
    let names: Vec<String> = p.names().filter(|n| n.starts_with("dec.head.")).cloned().collect();
    assert!(!names.is_empty());
    for n in names {
        let t = p.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let r = evaluate(&model, &p, &val, 4, &cfg).unwrap();
    let (_, gt) = val.batch::<f64>(&(0..val.len()).collect::<Vec<_>>());
    let n = gt.len() as f64;
    let bg = gt.iter().filter(|&&c| c == 0).count() as f64;
    let mut expected = vec![2.0 * bg / (bg + n)];
    for c in 1..cfg.encoder.num_classes {
        if gt.contains(&c) {
            expected.push(0.0);
        }
    }
    let want = expected.iter().sum::<f64>() / expected.len() as f64;
    assert!((r.report.dsc - want).abs() < 1e-12, "{} vs {want}", r.report.dsc);
}
