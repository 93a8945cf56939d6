//! End-to-end CLI checks: every subcommand drives the real binary on a
//! miniature dataset.

use std::path::Path;
use std::process::Command;

fn mcmae() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcmae"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn mcmae");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_json(path: &Path, value: serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

#[test]
fn unknown_subcommand_fails_with_usage() {
    let out = mcmae().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage") || err.contains("unrecognized"));
}

#[test]
fn mask_stats_reports_branch_frequencies() {
    let out = run_ok(mcmae().args([
        "mask-stats",
        "--strategy",
        "dcp",
        "--draws",
        "2000",
        "--n",
        "16",
        "--c",
        "4",
    ]));
    assert!(out.starts_with("metric,key,value"));
    let patch_freq: f64 = out
        .lines()
        .find(|l| l.starts_with("branch_freq,patch_only"))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((patch_freq - 0.5).abs() < 0.05, "patch branch {patch_freq}");

    // deterministic under the same seed
    let again = run_ok(mcmae().args([
        "mask-stats",
        "--strategy",
        "dcp",
        "--draws",
        "2000",
        "--n",
        "16",
        "--c",
        "4",
    ]));
    assert_eq!(out, again);
}

#[test]
fn full_pipeline_synth_train_eval_sweep_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let spec_path = dir.path().join("spec.json");
    write_json(
        &spec_path,
        serde_json::json!({
            "h": 16, "w": 16, "c": 3, "num_classes": 3,
            "pair": [0, 1], "texture_channel": 2,
            "noise_sigma": 0.0, "train": 12, "val": 4, "test": 8, "seed": 3
        }),
    );
    let out = run_ok(mcmae().args([
        "--json",
        "synth-data",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["train"], 12);
    assert!(data_dir.join("train/00011.mcif").exists());

    // tiny training config
    let cfg_path = dir.path().join("train.json");
    write_json(
        &cfg_path,
        serde_json::json!({
            "model": {
                "h": 16, "w": 16, "p": 8, "d": 16, "l": 2,
                "heads": 2, "enc_depth": 1, "mlp_ratio": 2,
                "dec_depth": 1, "dec_heads": 2,
                "num_classes": 3, "n_max_channels": 8
            },
            "mask": { "strategy": "dcp", "r_p": 0.75, "p_patch": 0.5, "p_channel": 0.5 },
            "epochs": 2, "batch_size": 4, "warmup_epochs": 1, "seed": 9
        }),
    );
    let ckpt = dir.path().join("model.mcpk");
    let log = dir.path().join("train.jsonl");
    let out = run_ok(mcmae().args([
        "--json",
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["steps"], 6);
    // JSON-lines log parses per line
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 6);
    for line in log_text.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["l_final"].is_number());
    }

    // determinism: retraining with the same seed gives an identical checkpoint
    let ckpt2 = dir.path().join("model2.mcpk");
    run_ok(mcmae().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--out",
        ckpt2.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(&ckpt2).unwrap(),
        "same-seed training must be bit-identical"
    );

    let out = run_ok(mcmae().args([
        "--json",
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--channels",
        "0,2",
    ]));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(summary["accuracy"].as_f64().unwrap() >= 0.0);

    let csv_path = dir.path().join("sweep.csv");
    let out = run_ok(mcmae().args([
        "--json",
        "sweep",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--k",
        "1",
        "--csv",
        csv_path.to_str().unwrap(),
    ]));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["sweeps"][0]["rows"].as_array().unwrap().len(), 3);
    assert!(summary["config_hash"].is_string());
    assert!(summary["full_accuracy"].is_number());
    assert!(std::fs::read_to_string(&csv_path)
        .unwrap()
        .starts_with("channels,accuracy"));

    // attention maps on one image
    let attn_prefix = dir.path().join("attn");
    run_ok(mcmae().args([
        "attn-map",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        data_dir.join("test/00000.mcif").to_str().unwrap(),
        "--out",
        attn_prefix.to_str().unwrap(),
    ]));
    let channels_csv = std::fs::read_to_string(dir.path().join("attn_channels.csv")).unwrap();
    assert!(channels_csv.starts_with("query_channel,to_ch0,to_ch1,to_ch2,to_cls"));
    assert!(dir.path().join("attn_memory.csv").exists());

    // reconstruction dump with a fully masked channel
    let recon_prefix = dir.path().join("recon");
    run_ok(mcmae().args([
        "recon-dump",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        data_dir.join("test/00000.mcif").to_str().unwrap(),
        "--out",
        recon_prefix.to_str().unwrap(),
        "--mask-channels",
        "1",
        "--passthrough",
    ]));
    for kind in ["original", "masked", "recon"] {
        let text = std::fs::read_to_string(dir.path().join(format!("recon_{kind}.csv"))).unwrap();
        assert!(text.starts_with("channel,y,x,value"));
        assert_eq!(text.lines().count(), 1 + 3 * 16 * 16);
    }
}

#[test]
fn finetune_channels_runs_on_remapped_data() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let spec_path = dir.path().join("spec.json");
    write_json(
        &spec_path,
        serde_json::json!({
            "h": 16, "w": 16, "c": 3, "num_classes": 3,
            "pair": [0, 1], "texture_channel": 2,
            "noise_sigma": 0.0, "train": 8, "val": 0, "test": 4, "seed": 5
        }),
    );
    run_ok(mcmae().args([
        "synth-data",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]));
    let cfg_path = dir.path().join("train.json");
    write_json(
        &cfg_path,
        serde_json::json!({
            "model": {
                "h": 16, "w": 16, "p": 8, "d": 16, "l": 2,
                "heads": 2, "enc_depth": 1, "mlp_ratio": 2,
                "dec_depth": 1, "dec_heads": 2,
                "num_classes": 3, "n_max_channels": 8
            },
            "mask": { "strategy": "dcp", "r_p": 0.75, "p_patch": 0.5, "p_channel": 0.5 },
            "epochs": 2, "batch_size": 4, "warmup_epochs": 1, "seed": 9
        }),
    );
    let ckpt = dir.path().join("model.mcpk");
    run_ok(mcmae().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]));

    // remap channel 2 -> 7 in a few images
    let novel_dir = dir.path().join("novel");
    std::fs::create_dir_all(&novel_dir).unwrap();
    for i in 0..4 {
        let (img, _) =
            mcmae_core::data::load_mcif(&data_dir.join(format!("test/{i:05}.mcif"))).unwrap();
        let ids: Vec<u16> = img
            .channel_ids
            .iter()
            .map(|&c| if c == 2 { 7 } else { c })
            .collect();
        let remapped =
            mcmae_core::tokenizer::MultiChannelImage::new(img.h, img.w, ids, img.pixels().to_vec())
                .unwrap();
        mcmae_core::data::save_mcif(&novel_dir.join(format!("{i:05}.mcif")), &remapped, None)
            .unwrap();
    }
    let tuned = dir.path().join("tuned.mcpk");
    let out = run_ok(mcmae().args([
        "--json",
        "finetune-channels",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        novel_dir.to_str().unwrap(),
        "--steps",
        "4",
        "--out",
        tuned.to_str().unwrap(),
    ]));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["novel_ids"], serde_json::json!([7]));
    assert!(tuned.exists());
}

#[test]
fn grad_check_subcommand_passes() {
    let out = run_ok(mcmae().args(["--json", "grad-check", "--coords", "8"]));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["pass"], true);
    assert!(summary["worst"].as_f64().unwrap() <= 1e-4);
}
