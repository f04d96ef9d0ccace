use tempograph::autodiff::Tape;
use tempograph::harness::{
    ablate, build_model, decode_checkpoint, encode_checkpoint, evaluate, load_checkpoint, metrics_csv, save_checkpoint, train,
    DataConfig, Dataset, ExperimentConfig, IdentityStub, MeanPose, ModelConfig, Predictor, Sample, CELLS, CHECKPOINT_MAGIC,
};

fn tiny(train: usize, test: usize) -> (ExperimentConfig, Dataset) {
    let mut cfg = ExperimentConfig {
        model: ModelConfig::miniature(),
        data: DataConfig {
            train,
            test,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.data.motion.frames = 4;
    cfg.train.batch_size = 4;
    let ds = Dataset::generate(&cfg.model.body, &cfg.data).unwrap();
    (cfg, ds)
}

#[test]
fn training_halves_the_loss() {
    let (mut cfg, ds) = tiny(32, 1);
    cfg.train.steps = 200;
    let out = train(&cfg.model, &cfg.train, &ds.train).unwrap();
    let first = out.curve[0];
    let last = out.curve.last().copied().unwrap();
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn same_seed_same_curve() {
    let (mut cfg, ds) = tiny(8, 1);
    cfg.train.steps = 12;
    let a = train(&cfg.model, &cfg.train, &ds.train).unwrap();
    let b = train(&cfg.model, &cfg.train, &ds.train).unwrap();
    assert_eq!(a.curve, b.curve);
    cfg.model.seed = 1;
    let c = train(&cfg.model, &cfg.train, &ds.train).unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn zero_learning_rate_keeps_the_loss() {
    let (mut cfg, ds) = tiny(6, 1);
    cfg.train.steps = 8;
    cfg.train.adam.lr = 0.0;
    cfg.train.batch_size = 6;
    cfg.model.tpdist_on = false;
    let out = train(&cfg.model, &cfg.train, &ds.train).unwrap();
    assert!(out.curve.iter().all(|&l| l == out.curve[0]));
}

#[test]
fn identity_on_clean_data_scores_zero() {
    let (_, ds) = tiny(2, 5);
    let rep = evaluate(&IdentityStub, &ds.body.regressor, &ds.clean_test()).unwrap();
    for r in &rep.rows {
        assert_eq!((r.mpvpe_mm, r.mpjpe_mm), (0.0, 0.0));
        assert!(r.pa_mpjpe_mm < 1e-9);
    }
}

#[test]
fn aggregate_is_mean_of_csv_rows() {
    let (_, ds) = tiny(4, 7);
    let mp = MeanPose::fit(&ds.train).unwrap();
    let rep = evaluate(&mp, &ds.body.regressor, &ds.test).unwrap();
    let csv = metrics_csv(&rep.rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sequence_id,mpvpe_mm,mpjpe_mm,pa_mpjpe_mm"));
    let mut sums = [0.0; 3];
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), i);
        for k in 0..3 {
            sums[k] += f[k + 1].parse::<f64>().unwrap();
        }
        count += 1;
    }
    assert_eq!(count, 7);
    let want = [rep.mean.mpvpe, rep.mean.mpjpe, rep.mean.pa_mpjpe];
    for k in 0..3 {
        assert!((sums[k] / count as f64 - want[k]).abs() < 1e-9 * want[k].max(1.0));
    }
}

#[test]
fn evaluation_is_bitwise_repeatable() {
    let (mut cfg, ds) = tiny(6, 4);
    cfg.train.steps = 6;
    let model = train(&cfg.model, &cfg.train, &ds.train).unwrap().model;
    let a = evaluate(&model, &ds.body.regressor, &ds.test).unwrap();
    let b = evaluate(&model, &ds.body.regressor, &ds.test).unwrap();
    assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
    assert_eq!(a, b);
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let (mut cfg, ds) = tiny(6, 2);
    cfg.train.steps = 4;
    let model = train(&cfg.model, &cfg.train, &ds.train).unwrap().model;
    let bytes = encode_checkpoint(&model);
    assert_eq!(&bytes[..4], &CHECKPOINT_MAGIC);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.predict(&ds.test[0]).unwrap(), model.predict(&ds.test[0]).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.predict(&ds.test[1]).unwrap(), model.predict(&ds.test[1]).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = build_model(&ModelConfig::miniature()).unwrap();
    let bytes = encode_checkpoint(&model);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
    let mut newer = bytes.clone();
    newer[4] = 99;
    assert!(decode_checkpoint(&newer).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn ablation_covers_every_cell_and_metric() {
    let (mut cfg, ds) = tiny(6, 3);
    cfg.train.steps = 4;
    let rep = ablate(&cfg, &ds).unwrap();
    assert_eq!(rep.cells.len(), 4);
    for (&(tp, hh), cell) in CELLS.iter().zip(&rep.cells) {
        assert_eq!((cell.tpdist_on, cell.hhloss_on), (tp, hh));
        assert_eq!(cell.runs.len(), cfg.seeds.len());
        let occ = cell.occluded.unwrap().mean;
        assert!([occ.mpvpe, occ.mpjpe, occ.pa_mpjpe].iter().all(|v| v.is_finite()));
    }
    let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 4);
    assert_eq!(rep.report_hash, rep.compute_hash());
    assert_eq!(ablate(&cfg, &ds).unwrap().report_hash, rep.report_hash);
}

#[test]
fn toggles_only_change_their_component() {
    let base = ModelConfig::miniature();
    let on = build_model(&base).unwrap();
    let off = build_model(&ModelConfig { tpdist_on: false, ..base.clone() }).unwrap();
    assert!(on.schedule().is_some());
    assert!(off.schedule().is_none());
    assert!(off.store.iter().all(|(name, _)| !name.starts_with("tpdist")));
    let no_hh = build_model(&ModelConfig { hhloss_on: false, ..base }).unwrap();
    let names = |m: &tempograph::harness::Model| m.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>();
    assert_eq!(names(&no_hh), names(&on));
}

#[test]
fn forward_shape_on_default_body() {
    let cfg = ModelConfig::default();
    let model = build_model(&cfg).unwrap();
    assert_eq!(model.n_vertices(), 96);
    let mut data = DataConfig {
        train: 1,
        test: 0,
        ..Default::default()
    };
    data.motion.frames = 4;
    let ds = Dataset::generate(&cfg.body, &data).unwrap();
    let s = Sample::from_sequence(&ds.train[0], cfg.unit_mm).unwrap();
    let mut tape = Tape::new();
    let p = model.store.bind_frozen(&mut tape);
    let x = tape.constant(s.input);
    let f = model.forward(&mut tape, &p, x, 1, 4, 0).unwrap();
    assert_eq!(tape.shape(f.vertices), &[4, 96, 3]);
}

#[test]
fn configs_parse_from_json_and_toml() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = 17;
    cfg.model.tpdist.steps = 30;
    let json = cfg.to_json();
    assert_eq!(ExperimentConfig::parse(&json).unwrap(), cfg);
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    assert!(ExperimentConfig::parse("{ not json").is_err());
    assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
}
