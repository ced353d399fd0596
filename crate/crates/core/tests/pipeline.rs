use std::path::Path;

use stg_core::harness::{
    eval_all, gen_data, load_base, pretrain_base, read_curve, render_curves, run_pipeline,
    score_lines, sweep, train_all, Checkpoint, ExperimentConfig, SweepKind, TrainOptions,
};
use stg_core::nets::Dims;
use stg_core::rl::Method;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        output_dir: dir.to_path_buf(),
        seeds: vec![1, 2],
        ..Default::default()
    };
    c.task.base_size = 60;
    c.task.n_valid = 4;
    c.task.n_test = 6;
    c.pretrain.dims = Dims {
        vocab: 33,
        embed: 4,
        hidden: 8,
        adapter: 6,
        selector_hidden: 4,
        critic_hidden: 4,
    };
    c.pretrain.updates = 6;
    c.pretrain.batch = 4;
    c.pretrain.workers = 1;
    c.train.updates = 4;
    c.train.batch = 2;
    c.train.eval_interval = 2;
    c.train.max_len = 12;
    c.train.workers = 1;
    c.eval.max_len = 12;
    c.sweep.c_grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    c.sweep.n_train = vec![4, 8];
    c
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&tiny(a.path())).unwrap();
    let mut cb = tiny(b.path());
    cb.train.workers = 3;
    let rb = run_pipeline(&cb).unwrap();
    assert_eq!(ra, rb);
    let rel = "reports/n16-stg";
    for ext in ["json", "txt"] {
        assert_eq!(
            read(&a.path().join(format!("{rel}.{ext}"))),
            read(&b.path().join(format!("{rel}.{ext}")))
        );
    }
    for s in &ra.seeds {
        assert_eq!(
            read(&a.path().join(s.curve.as_ref().unwrap())),
            read(&b.path().join(s.curve.as_ref().unwrap()))
        );
        assert_eq!(
            read(&a.path().join(&s.generations)),
            read(&b.path().join(&s.generations))
        );
    }
    assert_eq!(
        read(&a.path().join("base.ckpt")),
        read(&b.path().join("base.ckpt"))
    );
    assert_eq!(ra.seeds.len(), 2);
    assert!(a.path().join("runs/n16/stg/seed-1/config.toml").exists());
    assert!(a.path().join("reports/n16-stg.config.toml").exists());
}

#[test]
fn plm_and_fixed_zero_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pretrain_base(&cfg).unwrap();
    let mut plm = cfg.clone();
    plm.train.method = Method::Plm;
    let rp = eval_all(&plm).unwrap();
    let mut fixed = cfg.clone();
    fixed.train.method = Method::FixedC;
    fixed.train.c = Some(0.0);
    train_all(&fixed, TrainOptions::default()).unwrap();
    let rf = eval_all(&fixed).unwrap();
    assert_eq!(rp.mean, rf.mean);
    assert_eq!(rp.plm_mean, rf.plm_mean);
    assert_eq!(rp.gain_vs_plm, 0.0);
    for (p, f) in rp.seeds.iter().zip(&rf.seeds) {
        assert_eq!(p.metrics, f.metrics);
        let (gp, gf) = (
            read(&dir.path().join(&p.generations)),
            read(&dir.path().join(&f.generations)),
        );
        let body = |b: &[u8]| {
            String::from_utf8_lossy(b)
                .lines()
                .skip(1)
                .map(str::to_string)
                .collect::<Vec<_>>()
        };
        assert_eq!(body(&gp), body(&gf));
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = tiny(a.path());
    let cb = tiny(b.path());
    pretrain_base(&ca).unwrap();
    pretrain_base(&cb).unwrap();
    train_all(&ca, TrainOptions::default()).unwrap();
    let partial = train_all(
        &cb,
        TrainOptions {
            resume: false,
            stop_after: Some(3),
        },
    )
    .unwrap();
    assert_eq!(partial[0].update, 3);
    assert!(eval_all(&cb).unwrap_err().to_string().contains("--resume"));
    train_all(
        &cb,
        TrainOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    for seed in [1, 2] {
        let rel = format!("runs/n16/stg/seed-{seed}");
        assert_eq!(
            read(&a.path().join(&rel).join("model.ckpt")),
            read(&b.path().join(&rel).join("model.ckpt"))
        );
        assert_eq!(
            read(&a.path().join(&rel).join("curve.jsonl")),
            read(&b.path().join(&rel).join("curve.jsonl"))
        );
    }
    let (_, curve) = read_curve(&a.path().join("runs/n16/stg/seed-1/curve.jsonl")).unwrap();
    let steps: Vec<usize> = curve.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 2, 4]);
}

#[test]
fn sweep_emits_one_report_per_c_plus_dynamic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let reports = sweep(&cfg, SweepKind::FixedC).unwrap();
    let labels: Vec<&str> = reports.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "fixed-c-0",
            "fixed-c-0.25",
            "fixed-c-0.5",
            "fixed-c-0.75",
            "fixed-c-1",
            "stg"
        ]
    );
    let base = &reports[0].base_checkpoint;
    assert!(reports.iter().all(|r| &r.base_checkpoint == base));
    assert!(dir.path().join("reports/sweep-c-n16.txt").exists());

    let few = sweep(&cfg, SweepKind::FewShot).unwrap();
    assert_eq!(
        few.iter().map(|r| r.n_train).collect::<Vec<_>>(),
        vec![4, 8]
    );
    assert!(few.iter().all(|r| &r.base_checkpoint == base));
}

#[test]
fn curves_render_to_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(render_curves(&cfg)
        .unwrap_err()
        .to_string()
        .contains("stg train"));
    pretrain_base(&cfg).unwrap();
    train_all(&cfg, TrainOptions::default()).unwrap();
    let path = render_curves(&cfg).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# stg-curve v1 config "));
    assert_eq!(lines[1].split('\t').count(), 8);
    assert_eq!(lines.len(), 2 + 2 * 3);
}

#[test]
fn missing_artifacts_and_mismatches_are_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let e = train_all(&cfg, TrainOptions::default())
        .unwrap_err()
        .to_string();
    assert!(
        e.contains("missing base checkpoint") && e.contains("stg pretrain"),
        "{e}"
    );
    pretrain_base(&cfg).unwrap();
    let e = eval_all(&cfg).unwrap_err().to_string();
    assert!(e.contains("missing run checkpoint"), "{e}");

    let mut other = cfg.clone();
    other.pretrain.updates += 1;
    let e = load_base(&other).unwrap_err().to_string();
    assert!(e.contains("config hash mismatch"), "{e}");

    let ck = Checkpoint::load(&cfg.base_checkpoint()).unwrap();
    let mut dims = cfg.pretrain.dims;
    dims.vocab = 30;
    let e = ck.verify(dims, &cfg.base_hash()).unwrap_err().to_string();
    assert!(e.contains("vocabulary size mismatch"), "{e}");

    let empty = ExperimentConfig {
        seeds: vec![],
        ..cfg.clone()
    };
    assert!(gen_data(&empty)
        .unwrap_err()
        .to_string()
        .contains("seeds is empty"));
}

#[test]
fn gen_data_writes_three_splits_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let dirs = gen_data(&cfg).unwrap();
    assert_eq!(dirs.len(), 2);
    for d in dirs {
        for split in ["train", "valid", "test"] {
            assert!(d.join(format!("{split}.jsonl")).exists());
        }
    }
}

#[test]
fn score_lines_reports_standard_metrics() {
    let hyps = vec!["a b c d".to_string(), "x y".to_string()];
    let refs = vec!["a b c d".to_string(), "p q".to_string()];
    let m = score_lines(&hyps, &refs).unwrap();
    assert!((m["rouge_l"] - 0.5).abs() < 1e-12);
    assert!((m["rouge_1"] - 0.5).abs() < 1e-12);
    assert!(m["bleu"] > 0.0 && m["bleu"] < 1.0);
    assert!(score_lines(&hyps, &refs[..1]).is_err());
}
