//! `train` and `export` subcommands.

use crate::common::{ensure_dir, write_json, write_text, CliError, CliResult, MetricsDoc};
use crate::config::ExperimentConfig;
use neuroctl_core::checkpoint::{self, CheckpointMeta};
use neuroctl_core::csvio;
use neuroctl_core::plant::{TaskKind, TaskSpec};
use neuroctl_core::rng::Rng;
use neuroctl_core::runner::{rollout, EvalOptions, PolicyMode};
use neuroctl_core::spinal::neuron_kinematic_map;
use neuroctl_core::stack::ControlStack;
use neuroctl_core::trainer::{generate_demos, train};
use serde_json::json;
use std::path::Path;

fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            kind: TaskKind::Reach {
                target: [0.14, -0.10, 0.12, 0.0, 0.0, 0.0],
                duration: 40,
            },
            start: [0.0; 6],
            ticks: 48,
        },
        TaskSpec {
            kind: TaskKind::StaticHold,
            start: [0.0; 6],
            ticks: 24,
        },
    ]
}

/// Train on the configured task suite and write checkpoint, loss curve,
/// and a metrics document.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<MetricsDoc> {
    ensure_dir(out)?;
    let tasks = if cfg.tasks.is_empty() {
        default_tasks()
    } else {
        cfg.tasks.clone()
    };
    let seed = cfg.trainer.seed;
    let stack_cfg = cfg.stack.to_stack_config();
    let mut stack = ControlStack::init(stack_cfg, &mut Rng::seed_from(seed));
    let demos = generate_demos(
        &tasks,
        cfg.demos.n,
        cfg.demos.seed,
        cfg.stack.tokens,
        cfg.stack.channels,
        &cfg.demos.to_options(cfg.plant),
    )?;
    let report = train(&mut stack, &demos, &cfg.trainer)?;

    let meta = CheckpointMeta {
        stack: stack_cfg,
        train: serde_json::to_value(cfg.trainer)
            .map_err(|e| CliError::Numeric(e.to_string()))?,
        seed,
    };
    checkpoint::write_file(&out.join("checkpoint.nckp"), &stack, &meta)?;
    write_text(&out.join("loss.csv"), &csvio::loss_csv(&report.loss_curve))?;

    let doc = MetricsDoc {
        experiment: "train".into(),
        seed,
        metrics: json!({
            "episodes": demos.len(),
            "epochs": cfg.trainer.epochs,
            "final_loss": report.final_loss,
        }),
        pass: report.final_loss.is_finite(),
    };
    write_json(&out.join("metrics.json"), &doc)?;
    Ok(doc)
}

/// CSV artifacts: layer activity, attention maps, kinematic dominance maps.
pub fn run_export(
    artifact: &str,
    checkpoint_path: Option<&Path>,
    cfg: &ExperimentConfig,
    out: &Path,
) -> CliResult<()> {
    if !matches!(artifact, "activity" | "kinematic_map" | "attention") {
        return Err(CliError::Config(format!(
            "unknown artifact '{artifact}'; expected activity, attention, or kinematic_map"
        )));
    }
    ensure_dir(out)?;
    match artifact {
        "activity" | "kinematic_map" => {
            let path = checkpoint_path.ok_or_else(|| {
                CliError::Config(format!("export {artifact} needs --checkpoint"))
            })?;
            let (mut stack, _meta) = checkpoint::read_file(path)?;
            let task = cfg.tasks.first().cloned().unwrap_or_else(|| TaskSpec {
                kind: TaskKind::Reach {
                    target: [0.14, -0.10, 0.12, 0.0, 0.0, 0.0],
                    duration: 40,
                },
                start: [0.0; 6],
                ticks: 48,
            });
            let opts = EvalOptions {
                plant: cfg.plant,
                seed: cfg.trainer.seed,
                tolerances: cfg.eval.tolerances,
                ..Default::default()
            };
            let r = rollout(&mut stack, &task, PolicyMode::Trained, &opts)?;
            match artifact {
                "activity" => {
                    write_text(&out.join("activity.csv"), &csvio::activity_csv(&r.trace))?;
                    write_text(
                        &out.join("neuron_activity.csv"),
                        &csvio::neuron_activity_csv(&r.trace),
                    )?;
                }
                _ => {
                    let (map, defined) = neuron_kinematic_map(&r.trace, &r.actions)
                        .map_err(|e| CliError::Numeric(e.to_string()))?;
                    write_text(
                        &out.join("kinematic_map.csv"),
                        &csvio::kinematic_map_csv(&map, &defined),
                    )?;
                }
            }
        }
        "attention" => {
            // Structural export from a seeded bottleneck on a seeded scene;
            // the attention experiment writes the trained variant.
            use neuroctl_core::cortical::{synth_scene, QFormer, QFormerConfig, SceneConfig};
            let scene_cfg = SceneConfig::default();
            let mut rng = Rng::seed_from(cfg.trainer.seed);
            let qf = QFormer::init(
                QFormerConfig {
                    queries: cfg.stack.tokens.max(2),
                    d_model: cfg.stack.channels,
                    d_feat: scene_cfg.d_feat,
                    layer_range: (1, scene_cfg.n_layers),
                },
                &mut rng,
            );
            let scene = synth_scene(&scene_cfg, &mut rng);
            let (_z, attn) = qf
                .distill(&scene.stack)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            write_text(&out.join("attention_map.csv"), &csvio::attention_csv(&attn))?;
        }
        _ => unreachable!("artifact validated above"),
    }
    Ok(())
}
