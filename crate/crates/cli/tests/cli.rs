mod common;

use std::path::{Path, PathBuf};

use common::{ok, oodmine, p};
use oodmine::clustering::{cluster_purity, import_assignments};
use oodmine::mining::{clustermine, posmine, zero_shot_assign, MinedLabelSets};
use oodmine::scoring::read_scores_csv;
use oodmine::{load_embeddings, save_embeddings, EmbeddingMatrix};
use tempfile::TempDir;

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("synth{seed}"));
    ok(&[
        "synth",
        "--out-dir",
        p(&out),
        "--seed",
        &seed.to_string(),
        "--n-ood",
        "200",
    ]);
    out
}

fn scores(path: &Path) -> Vec<f64> {
    read_scores_csv(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_scores(path: &Path, s: &[f64]) {
    let mut buf = Vec::new();
    oodmine::scoring::write_scores_csv(s, &mut buf).unwrap();
    std::fs::write(path, buf).unwrap();
}

#[test]
fn cluster_without_clusters_is_usage_error() {
    let t = TempDir::new().unwrap();
    let d = synth(t.path(), 0);
    let out = oodmine(&[
        "cluster",
        "--emb",
        p(&d.join("id.emb")),
        "--out",
        p(&t.path().join("a.txt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cluster_more_than_n_fails_without_output() {
    let t = TempDir::new().unwrap();
    let d = synth(t.path(), 0);
    let a = t.path().join("a.txt");
    let out = oodmine(&[
        "cluster",
        "--emb",
        p(&d.join("id.emb")),
        "--clusters",
        "4001",
        "--out",
        p(&a),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!a.exists());
}

#[test]
fn cluster_is_pure_on_planted_instance() {
    let t = TempDir::new().unwrap();
    let d = synth(t.path(), 1);
    let a = t.path().join("a.txt");
    let c = t.path().join("c.emb");
    ok(&[
        "cluster",
        "--emb",
        p(&d.join("id.emb")),
        "--clusters",
        "40",
        "--seed",
        "1",
        "--out",
        p(&a),
        "--centroids-out",
        p(&c),
    ]);
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("truth.json")).unwrap()).unwrap();
    let ids: Vec<usize> = serde_json::from_value(truth["concept_ids"].clone()).unwrap();
    let assign = import_assignments(&a, ids.len()).unwrap();
    assert!(cluster_purity(&assign, &ids).unwrap().weighted_mean >= 0.95);
    assert_eq!(load_embeddings(&c).unwrap().rows(), 40);
}

#[test]
fn mine_matches_library() {
    let t = TempDir::new().unwrap();
    let d = synth(t.path(), 2);
    let a = t.path().join("a.txt");
    ok(&[
        "cluster",
        "--emb",
        p(&d.join("id.emb")),
        "--clusters",
        "40",
        "--out",
        p(&a),
    ]);
    let common = |out: &Path| {
        vec![
            "--img".to_string(),
            p(&d.join("id.emb")).into(),
            "--text".into(),
            p(&d.join("corpus.emb")).into(),
            "--corpus".into(),
            p(&d.join("corpus.txt")).into(),
            "--out".into(),
            p(out).into(),
        ]
    };
    let cm = t.path().join("cm.json");
    let mut args: Vec<String> = vec!["mine".into(), "clustermine".into(), "--assign".into(), p(&a).into()];
    args.extend(common(&cm));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let pm = t.path().join("pm.json");
    let mut args: Vec<String> = vec!["mine".into(), "posmine".into(), "--min-count".into(), "100".into()];
    args.extend(common(&pm));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let images = load_embeddings(d.join("id.emb")).unwrap();
    let text = load_embeddings(d.join("corpus.emb")).unwrap();
    let labels = oodmine::embedding_io::load_labels(d.join("corpus.txt")).unwrap();
    let corpus = oodmine::Corpus::from_labels(labels, "corpus");
    let zs = zero_shot_assign(&images, &text).unwrap();
    let ca = import_assignments(&a, images.rows()).unwrap();
    let lib = clustermine(&zs, &ca, &corpus).unwrap().sets;
    assert_eq!(MinedLabelSets::load(&cm).unwrap(), lib);
    let lib = posmine(&zs, &corpus, 100).unwrap();
    let got = MinedLabelSets::load(&pm).unwrap();
    assert_eq!(got.params.min_count, Some(100));
    assert_eq!(got, lib);
    let dump = std::fs::read_to_string(pm.with_extension("labels.txt")).unwrap();
    assert_eq!(dump.lines().count(), lib.pos.len());

    let neg = t.path().join("neg.json");
    ok(&[
        "mine",
        "neg",
        "--mined",
        p(&cm),
        "--text",
        p(&d.join("corpus.emb")),
        "--corpus",
        p(&d.join("corpus.txt")),
        "--k",
        "40",
        "--out",
        p(&neg),
    ]);
    let pruned = MinedLabelSets::load(&neg).unwrap();
    assert_eq!(pruned.neg.len(), 40);
    assert_eq!(pruned.pos, MinedLabelSets::load(&cm).unwrap().pos);
}

#[test]
fn score_contracts() {
    let t = TempDir::new().unwrap();
    let d = synth(t.path(), 3);
    let img = d.join("id.emb");
    let text = load_embeddings(d.join("corpus.emb")).unwrap();
    let one = t.path().join("one.emb");
    save_embeddings(&text.select_rows(&[0]).unwrap(), &one).unwrap();
    let empty = t.path().join("empty.emb");
    save_embeddings(&EmbeddingMatrix::empty(text.dims()).unwrap(), &empty).unwrap();

    let out = t.path().join("mcm.csv");
    ok(&["score", "mcm", "--img", p(&img), "--pos-emb", p(&one), "--out", p(&out)]);
    assert!(scores(&out).iter().all(|&s| s == 1.0));

    let out = t.path().join("pn.csv");
    ok(&[
        "score",
        "posneg",
        "--img",
        p(&img),
        "--pos-emb",
        p(&one),
        "--neg-emb",
        p(&empty),
        "--out",
        p(&out),
    ]);
    let s = scores(&out);
    assert_eq!(s.len(), 4000);
    assert!(s.iter().all(|&s| s == 1.0));

    let out = t.path().join("grouped.csv");
    let r = oodmine(&[
        "score",
        "grouped",
        "--img",
        p(&img),
        "--pos-emb",
        p(&one),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn score_clustermine_sets_in_unit_interval() {
    let t = TempDir::new().unwrap();
    let d = synth(t.path(), 4);
    let a = t.path().join("a.txt");
    let cm = t.path().join("cm.json");
    ok(&[
        "cluster",
        "--emb",
        p(&d.join("id.emb")),
        "--clusters",
        "40",
        "--out",
        p(&a),
    ]);
    ok(&[
        "mine",
        "clustermine",
        "--assign",
        p(&a),
        "--img",
        p(&d.join("id.emb")),
        "--text",
        p(&d.join("corpus.emb")),
        "--corpus",
        p(&d.join("corpus.txt")),
        "--out",
        p(&cm),
    ]);
    for method in ["posneg", "grouped"] {
        let out = t.path().join(format!("{method}.csv"));
        ok(&[
            "score",
            method,
            "--img",
            p(&d.join("ood.emb")),
            "--text",
            p(&d.join("corpus.emb")),
            "--mined",
            p(&cm),
            "--group-size",
            "100",
            "--tau",
            "0.01",
            "--out",
            p(&out),
        ]);
        let s = scores(&out);
        assert_eq!(s.len(), 200);
        assert!(s.iter().all(|&x| x > 0.0 && x <= 1.0), "{method}");
    }
}

#[test]
fn eval_perfect_separation_and_means() {
    let t = TempDir::new().unwrap();
    let id = t.path().join("id.csv");
    write_scores(&id, &[0.9, 0.8, 0.95, 0.7]);
    let mut oods = Vec::new();
    for (i, v) in [[0.1, 0.2, 0.3], [0.6, 0.75, 0.85], [0.0, 0.96, 0.5]]
        .iter()
        .enumerate()
    {
        let f = t.path().join(format!("o{i}.csv"));
        write_scores(&f, v);
        oods.push(format!("set{i}={}", p(&f)));
    }
    let out = t.path().join("eval.json");
    let md = t.path().join("eval.md");
    let mut args = vec!["eval", "--id", p(&id), "--out", p(&out), "--markdown", p(&md)];
    for o in &oods {
        args.extend(["--ood", o.as_str()]);
    }
    ok(&args);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports[0]["auroc"], 1.0);
    assert_eq!(reports[0]["fpr_at_95tpr"], 0.0);
    let mean: f64 = reports.iter().map(|r| r["auroc"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert_eq!(v["mean_auroc"].as_f64().unwrap(), mean);
    let table = std::fs::read_to_string(&md).unwrap();
    assert!(table.starts_with("| Method | set0 | set1 | set2 | Average |"));
}

#[test]
fn eval_rejects_bad_inputs() {
    let t = TempDir::new().unwrap();
    let id = t.path().join("id.csv");
    write_scores(&id, &[0.9, 0.8]);
    let empty = t.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let header_only = t.path().join("h.csv");
    std::fs::write(&header_only, "index,score\n").unwrap();
    let garbled = t.path().join("g.csv");
    std::fs::write(&garbled, "index,score\n0,0.5\n2,0.1\n").unwrap();
    for bad in [&empty, &header_only, &garbled] {
        let out = t.path().join("eval.json");
        let r = oodmine(&["eval", "--id", p(&id), "--ood", p(bad), "--out", p(&out)]);
        assert_eq!(r.status.code(), Some(1), "{}", bad.display());
        assert!(String::from_utf8_lossy(&r.stderr).contains("error"));
        assert!(!out.exists());
    }
}

#[test]
fn ingest_prompts_and_aggregation() {
    let t = TempDir::new().unwrap();
    let raw = t.path().join("raw.txt");
    std::fs::write(&raw, "cat\n  dog \n\ncat\nbird\n").unwrap();
    let clean = t.path().join("clean.txt");
    let queries = t.path().join("q.txt");
    ok(&[
        "ingest",
        "--input",
        p(&raw),
        "--output",
        p(&clean),
        "--prompts",
        "simple",
        "--queries-out",
        p(&queries),
    ]);
    assert_eq!(std::fs::read_to_string(&clean).unwrap(), "cat\ndog\nbird\n");
    let q = std::fs::read_to_string(&queries).unwrap();
    assert_eq!(q.lines().count(), 21);
    assert_eq!(q.lines().next(), Some("itap of a cat"));

    let mut rows = Vec::new();
    for l in 0..3 {
        for k in 0..7 {
            let mut v = vec![0.0f32; 4];
            v[l] = 1.0;
            v[3] = if k % 2 == 0 { 0.5 } else { -0.5 };
            rows.push(v);
        }
    }
    let per_query = t.path().join("pq.emb");
    save_embeddings(&EmbeddingMatrix::from_rows(&rows).unwrap(), &per_query).unwrap();
    let text_out = t.path().join("text.emb");
    ok(&[
        "ingest",
        "--input",
        p(&raw),
        "--output",
        p(&clean),
        "--prompts",
        "simple",
        "--per-query-emb",
        p(&per_query),
        "--text-out",
        p(&text_out),
    ]);
    let agg = load_embeddings(&text_out).unwrap();
    assert_eq!(agg.rows(), 3);
    for l in 0..3 {
        assert!(agg.row(l)[l] > 0.99);
    }
}

#[test]
fn run_all_writes_full_pipeline() {
    let t = TempDir::new().unwrap();
    let d = synth(t.path(), 5);
    let cfg = serde_json::json!({
        "id_emb": d.join("id.emb"),
        "ood": {"fresh": d.join("ood.emb")},
        "corpus": d.join("corpus.txt"),
        "text_emb": d.join("corpus.emb"),
        "method": "clustermine",
        "C": 40,
        "K": 100,
        "out_dir": t.path().join("run"),
    });
    let cfg_path = t.path().join("run.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    ok(&["run-all", "--config", p(&cfg_path)]);
    for f in [
        "assign.txt",
        "mined.json",
        "scores_id.csv",
        "scores_fresh.csv",
        "eval.json",
        "eval.md",
    ] {
        assert!(t.path().join("run").join(f).exists(), "{f}");
    }
    let mined = MinedLabelSets::load(t.path().join("run/mined.json")).unwrap();
    assert_eq!(mined.neg.len(), 100);

    let bad = serde_json::json!({
        "id_emb": "x", "ood": {"a": "y"}, "corpus": "c", "text_emb": "t",
        "method": "posmine", "out_dir": "o",
    });
    std::fs::write(&cfg_path, bad.to_string()).unwrap();
    let r = oodmine(&["run-all", "--config", p(&cfg_path)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("\"M\""));
}

#[test]
fn report_robust_deltas() {
    let t = TempDir::new().unwrap();
    let id = t.path().join("id.csv");
    let shifted = t.path().join("shift.csv");
    let ood = t.path().join("ood.csv");
    write_scores(&id, &[0.9, 0.8, 0.7, 0.6]);
    write_scores(&shifted, &[0.9, 0.5, 0.4, 0.3]);
    write_scores(&ood, &[0.65, 0.55, 0.1]);
    let ood_arg = format!("x={}", p(&ood));
    let reference = t.path().join("ref.json");
    let sh = t.path().join("imagenet_v2.json");
    ok(&[
        "eval",
        "--id",
        p(&id),
        "--ood",
        &ood_arg,
        "--method",
        "m",
        "--out",
        p(&reference),
    ]);
    ok(&[
        "eval",
        "--id",
        p(&shifted),
        "--ood",
        &ood_arg,
        "--method",
        "m",
        "--out",
        p(&sh),
    ]);
    let out = t.path().join("robust.csv");
    ok(&[
        "report",
        "--inputs",
        p(&sh),
        "--robust-reference",
        p(&reference),
        "--out",
        p(&out),
    ]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "shifted_id,method,ood_set,reference_auroc,shifted_auroc,delta_pct"
    );
    assert_eq!(lines.len(), 3);
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&cols[..3], ["imagenet_v2", "m", "x"]);
    let r: f64 = cols[3].parse().unwrap();
    let s: f64 = cols[4].parse().unwrap();
    let delta: f64 = cols[5].parse().unwrap();
    assert!((r - 11.0 / 12.0).abs() < 1e-15);
    assert!((s - 0.5).abs() < 1e-15);
    assert!((delta - 100.0 * (s - r) / r).abs() < 1e-12);
}
