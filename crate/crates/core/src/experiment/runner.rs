use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::*;
use crate::analytics::signals::frustration_signal;
use crate::analytics::web::build_snapshot;
use crate::intervene::{run_anneal, run_forgetting, AnnealParams, ForgetParams, InterventionContext, InterventionReport};
use crate::trainer::Simulation;

/// When an annealing intervention fires.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AnnealTrigger {
    /// After exactly this many completed steps.
    Fixed { step: usize },
    /// As soon as the cluster-count peak is confirmed, or at `deadline`.
    Frustration { window: usize, confirm: usize, deadline: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "lowercase")]
pub enum InterventionKind {
    Anneal { trigger: AnnealTrigger, params: AnnealParams },
    Forget { step: usize, params: ForgetParams },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub name: String,
    pub total_steps: usize,
    /// Fired in order, each at most once.
    pub interventions: Vec<InterventionKind>,
}

impl Plan {
    pub fn baseline(total_steps: usize) -> Self {
        Self {
            name: format!("baseline-{total_steps}"),
            total_steps,
            interventions: Vec::new(),
        }
    }

    pub fn anneal(trigger: AnnealTrigger, params: AnnealParams, total_steps: usize) -> Self {
        let at = match &trigger {
            AnnealTrigger::Fixed { step } => step.to_string(),
            AnnealTrigger::Frustration { .. } => "frustration".to_string(),
        };
        Self {
            name: format!("anneal@{at}-{total_steps}"),
            total_steps,
            interventions: vec![InterventionKind::Anneal { trigger, params }],
        }
    }

    pub fn forget(step: usize, params: ForgetParams, total_steps: usize) -> Self {
        Self {
            name: format!("forget@{step}-{total_steps}"),
            total_steps,
            interventions: vec![InterventionKind::Forget { step, params }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in &self.interventions {
            let (step, tau) = match i {
                InterventionKind::Anneal { trigger: AnnealTrigger::Fixed { step }, params } => (*step, params.tau),
                InterventionKind::Anneal { trigger: AnnealTrigger::Frustration { deadline, window, confirm }, params } => {
                    if *window == 0 || *confirm == 0 {
                        return Err(Error::param("frustration window and confirm must be positive"));
                    }
                    (*deadline, params.tau)
                }
                InterventionKind::Forget { step, params } => (*step, params.tau),
            };
            if step > self.total_steps {
                return Err(Error::param(format!(
                    "intervention at step {step} lies beyond total_steps={}",
                    self.total_steps
                )));
            }
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::param(format!("tau must lie in (0, 1), got {tau}")));
            }
        }
        Ok(())
    }
}

/// Trigger description if `kind` should fire now, with `completed` steps done.
fn due(kind: &InterventionKind, completed: usize, steps: &[usize], counts: &[f64]) -> Option<String> {
    match kind {
        InterventionKind::Anneal { trigger: AnnealTrigger::Fixed { step }, .. } | InterventionKind::Forget { step, .. } => {
            (completed == *step).then(|| format!("fixed step {step}"))
        }
        InterventionKind::Anneal { trigger: AnnealTrigger::Frustration { window, confirm, deadline }, .. } => {
            if let Some(peak) = frustration_signal(steps, counts, *window, *confirm) {
                Some(format!("cluster-count peak at step {peak}, confirmed at step {completed}"))
            } else {
                (completed >= *deadline).then(|| format!("no confirmed cluster-count peak by deadline step {deadline}"))
            }
        }
    }
}

struct Runner<'a> {
    dir: &'a Path,
    manifest: RunManifest,
    sim: Simulation,
    steps: Vec<usize>,
    counts: Vec<f64>,
    metrics_out: BufWriter<File>,
}

impl Runner<'_> {
    fn write_policy(&mut self, rel: &str) -> Result<()> {
        let seed = self.sim.config.master_seed;
        let step = self.sim.step;
        let policy = &self.sim.policy;
        write_atomic(&self.dir.join(rel), |out| policy.write_checkpoint(out, seed, step))?;
        self.manifest.record(self.dir, rel)
    }

    fn write_web(&mut self, rel: &str) -> Result<()> {
        let snap = build_snapshot(&self.sim.policy, &self.sim.graph, self.sim.config.web_threshold, self.sim.step);
        write_atomic(&self.dir.join(rel), |out| snap.write(out))?;
        self.manifest.record(self.dir, rel)
    }

    /// Makes everything up to the current step durable.
    fn checkpoint(&mut self) -> Result<()> {
        let step = self.sim.step;
        self.write_web(&web_snapshot_name(step))?;
        let ckpt = policy_checkpoint_name(step);
        self.write_policy(&ckpt)?;
        self.manifest.last_checkpoint = Some(ckpt);
        self.save()
    }

    fn save(&mut self) -> Result<()> {
        self.metrics_out.flush()?;
        self.metrics_out.get_ref().sync_data()?;
        self.manifest.record(self.dir, METRICS_FILE)?;
        self.manifest.completed_steps = self.sim.step;
        self.manifest.save(self.dir)
    }

    fn intervene(&mut self, event: usize, kind: &InterventionKind, trigger: String) -> Result<()> {
        let step = self.sim.step;
        log::info!("intervention {event} after step {step}: {trigger}");
        let before = intervention_checkpoint_name(step, event, "pre");
        let after = intervention_checkpoint_name(step, event, "post");
        self.metrics_out.flush()?;
        self.write_policy(&before)?;

        let Simulation { graph, tasks, config, policy, .. } = &mut self.sim;
        let ctx = InterventionContext {
            graph,
            tasks,
            config,
            step,
            event: event as u64,
        };
        let mut report: InterventionReport = match kind {
            InterventionKind::Anneal { params, .. } => run_anneal(policy, &ctx, params)?,
            InterventionKind::Forget { params, .. } => run_forgetting(policy, &ctx, params)?,
        };
        report.checkpoint_before = Some(before.clone());
        report.checkpoint_after = Some(after.clone());

        self.write_policy(&after)?;
        self.write_web(&format!("snapshots/web-{step:06}-post-{event}.edges"))?;
        let rel = intervention_report_name(event);
        write_atomic(&self.dir.join(&rel), |out| {
            serde_json::to_writer_pretty(&mut *out, &report).map_err(|e| Error::format("intervention report", e.to_string()))?;
            writeln!(out)?;
            Ok(())
        })?;
        self.manifest.record(self.dir, &rel)?;
        self.manifest.timeline.push(TimelineEntry::Intervention {
            event,
            protocol: report.protocol,
            step,
            trigger,
            report: rel,
            checkpoint_before: before,
            checkpoint_after: after.clone(),
        });
        self.manifest.last_checkpoint = Some(after);
        self.save()
    }

    fn fired(&self) -> Vec<bool> {
        let mut done = vec![false; self.manifest.plan.interventions.len()];
        for e in &self.manifest.timeline {
            if let TimelineEntry::Intervention { event, .. } = e {
                done[*event] = true;
            }
        }
        done
    }

    fn run(mut self) -> Result<RunManifest> {
        let plan = self.manifest.plan.clone();
        let snapshot_every = self.sim.config.snapshot_every;
        let mut done = self.fired();
        loop {
            for (event, kind) in plan.interventions.iter().enumerate() {
                if done[event] {
                    continue;
                }
                if let Some(trigger) = due(kind, self.sim.step, &self.steps, &self.counts) {
                    self.intervene(event, kind, trigger)?;
                    done[event] = true;
                }
            }
            if self.sim.step >= plan.total_steps {
                break;
            }
            let m = self.sim.step_once()?;
            writeln!(self.metrics_out, "{}", metrics_line(&m))?;
            self.steps.push(m.step);
            self.counts.push(m.cluster_count as f64);
            self.manifest.note_trained(m.step);
            if m.step % snapshot_every == 0 || m.step == plan.total_steps {
                self.checkpoint()?;
            }
        }
        self.manifest.complete = true;
        self.save()?;
        Ok(self.manifest)
    }
}

/// Executes `plan` in `dir`, creating the run or resuming it from its last
/// durable checkpoint. A finished run is returned as is.
pub fn run_plan(dir: &Path, config: &TrainConfig, plan: &Plan) -> Result<RunManifest> {
    config.validate()?;
    plan.validate()?;
    fs::create_dir_all(dir)?;
    let _lock = RunLock::acquire(dir)?;

    if dir.join(MANIFEST_FILE).exists() {
        let manifest = RunManifest::load(dir)?;
        if &manifest.config != config || &manifest.plan != plan {
            return Err(Error::param(format!(
                "{} holds a run with a different config or plan",
                dir.display()
            )));
        }
        if manifest.complete {
            return Ok(manifest);
        }
        return resume(dir, manifest);
    }

    let sim = Simulation::new(config.clone())?;
    let mut manifest = RunManifest::new(config.clone(), plan.clone());
    write_atomic(&dir.join(CONFIG_FILE), |out| {
        out.write_all(config.to_toml_string().as_bytes())?;
        Ok(())
    })?;
    write_atomic(&dir.join(GRAPH_FILE), |out| sim.graph.write_edge_list(out))?;
    write_atomic(&dir.join(TASKS_FILE), |out| sim.tasks.write(out))?;
    for rel in [CONFIG_FILE, GRAPH_FILE, TASKS_FILE] {
        manifest.record(dir, rel)?;
    }
    write_metrics_header(&dir.join(METRICS_FILE))?;
    let metrics_out = BufWriter::new(OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?);
    let mut runner = Runner {
        dir,
        manifest,
        sim,
        steps: Vec::new(),
        counts: Vec::new(),
        metrics_out,
    };
    runner.checkpoint()?;
    runner.run()
}

/// Drops timeline entries that lie after checkpoint `ckpt` at `step`.
fn clip_timeline(timeline: &mut Vec<TimelineEntry>, ckpt: &str, step: usize) {
    let after_event = timeline.iter().position(
        |e| matches!(e, TimelineEntry::Intervention { checkpoint_after, .. } if checkpoint_after == ckpt),
    );
    if let Some(i) = after_event {
        timeline.truncate(i + 1);
    }
    // a periodic checkpoint at `step` precedes any intervention at `step`
    timeline.retain(|e| match e {
        TimelineEntry::Train { from, .. } => *from < step,
        TimelineEntry::Intervention { step: s, .. } => *s < step || after_event.is_some(),
    });
    for e in timeline.iter_mut() {
        if let TimelineEntry::Train { to, .. } = e {
            *to = (*to).min(step);
        }
    }
}

fn resume(dir: &Path, mut manifest: RunManifest) -> Result<RunManifest> {
    let data = RunData::open(dir)?;
    let ckpt = manifest
        .last_checkpoint
        .clone()
        .ok_or_else(|| Error::format("manifest", "no checkpoint to resume from"))?;
    let (policy, step) = data.load_policy(&ckpt)?;
    log::info!("resuming {} from {ckpt} (step {step})", dir.display());
    clip_timeline(&mut manifest.timeline, &ckpt, step);
    truncate_metrics(&dir.join(METRICS_FILE), step)?;
    let metrics: Vec<StepMetrics> = read_metrics(&dir.join(METRICS_FILE))?;
    let metrics_out = BufWriter::new(OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?);
    let sim = Simulation {
        config: manifest.config.clone(),
        graph: data.graph,
        tasks: data.tasks,
        policy,
        step,
    };
    let runner = Runner {
        dir,
        manifest,
        sim,
        steps: metrics.iter().map(|m| m.step).collect(),
        counts: metrics.iter().map(|m| m.cluster_count as f64).collect(),
        metrics_out,
    };
    runner.run()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub identical: Vec<String>,
    /// Differ bytewise but agree numerically within the tolerance.
    pub within_tolerance: Vec<String>,
    pub differing: Vec<String>,
    /// Present in the replay but not inventoried in the original.
    pub missing_in_original: Vec<String>,
}

impl ReplayReport {
    pub fn is_identical(&self) -> bool {
        self.within_tolerance.is_empty() && self.differing.is_empty() && self.missing_in_original.is_empty()
    }

    pub fn is_reproduced(&self) -> bool {
        self.differing.is_empty() && self.missing_in_original.is_empty()
    }
}

pub const REPLAY_TOLERANCE: f64 = 1e-9;

fn values_close(a: &Value, b: &Value, tol: f64) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => (x - y).abs() < tol || x == y,
            _ => x == y,
        },
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(a, b)| values_close(a, b, tol)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| values_close(v, w, tol)))
        }
        _ => a == b,
    }
}

fn metrics_within_tolerance(a: &Path, b: &Path) -> Result<bool> {
    let (x, y) = (read_metrics(a)?, read_metrics(b)?);
    if x.len() != y.len() {
        return Ok(false);
    }
    for (m, n) in x.iter().zip(&y) {
        let v = serde_json::to_value(m).expect("metrics serialize");
        let w = serde_json::to_value(n).expect("metrics serialize");
        if !values_close(&v, &w, REPLAY_TOLERANCE) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Re-executes a finished run's config and plan into `into` and compares
/// every artifact digest against the original inventory.
pub fn replay(original: &Path, into: &Path) -> Result<ReplayReport> {
    let manifest = RunManifest::load(original)?;
    if into.join(MANIFEST_FILE).exists() {
        return Err(Error::param(format!("{} already holds a run", into.display())));
    }
    let fresh = run_plan(into, &manifest.config, &manifest.plan)?;
    let mut report = ReplayReport::default();
    for (rel, digest) in &fresh.files {
        match manifest.files.get(rel) {
            None => report.missing_in_original.push(rel.clone()),
            Some(d) if d == digest => report.identical.push(rel.clone()),
            Some(_) if rel == METRICS_FILE && metrics_within_tolerance(&original.join(rel), &into.join(rel))? => {
                report.within_tolerance.push(rel.clone())
            }
            Some(_) => report.differing.push(rel.clone()),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            n_nodes: 40,
            out_degree: 4,
            n_tasks: 6,
            n_rollout: 16,
            l_max: 8,
            eval_every: 2,
            eval_samples: 8,
            snapshot_every: 3,
            learning_rate: 0.5,
            master_seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_step_plan_writes_header_and_initial_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let m = run_plan(dir.path(), &tiny(), &Plan::baseline(0)).unwrap();
        assert!(m.complete && m.timeline.is_empty());
        assert!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().is_empty());
        assert!(m.files.contains_key(&web_snapshot_name(0)));
        assert!(m.verify(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn fixed_triggers_fire_once_at_their_step() {
        let steps = [1, 2, 3];
        let kind = InterventionKind::Forget { step: 2, params: ForgetParams::default() };
        assert!(due(&kind, 1, &steps[..1], &[0.0]).is_none());
        assert!(due(&kind, 2, &steps[..2], &[0.0, 0.0]).is_some());
        let late = InterventionKind::Anneal {
            trigger: AnnealTrigger::Frustration { window: 3, confirm: 2, deadline: 5 },
            params: AnnealParams::default(),
        };
        assert!(due(&late, 4, &[1, 2, 3, 4], &[0.0; 4]).is_none());
        assert!(due(&late, 5, &[1, 2, 3, 4, 5], &[0.0; 5]).unwrap().contains("deadline"));
    }

    #[test]
    fn plan_validation() {
        assert!(Plan::forget(10, ForgetParams::default(), 5).validate().is_err());
        let bad_tau = Plan::forget(1, ForgetParams { tau: 1.0, ..ForgetParams::default() }, 5);
        assert!(bad_tau.validate().is_err());
        assert!(Plan::anneal(AnnealTrigger::Fixed { step: 5 }, AnnealParams::default(), 5).validate().is_ok());
    }

    #[test]
    fn timeline_clips_to_checkpoint() {
        let event = TimelineEntry::Intervention {
            event: 0,
            protocol: crate::intervene::Protocol::Forget,
            step: 12,
            trigger: String::new(),
            report: String::new(),
            checkpoint_before: "pre".into(),
            checkpoint_after: "post".into(),
        };
        let full = vec![
            TimelineEntry::Train { from: 0, to: 12 },
            event.clone(),
            TimelineEntry::Train { from: 12, to: 24 },
        ];
        let mut t = full.clone();
        clip_timeline(&mut t, "post", 12);
        assert_eq!(t, vec![TimelineEntry::Train { from: 0, to: 12 }, event]);
        let mut t = full.clone();
        clip_timeline(&mut t, "snapshots/policy-000012.ckpt", 12);
        assert_eq!(t, vec![TimelineEntry::Train { from: 0, to: 12 }]);
        let mut t = full;
        clip_timeline(&mut t, "snapshots/policy-000006.ckpt", 6);
        assert_eq!(t, vec![TimelineEntry::Train { from: 0, to: 6 }]);
    }

    #[test]
    fn values_close_tolerates_small_float_noise() {
        let a: Value = serde_json::json!({"x": [1.0, 2.0], "y": null});
        let b: Value = serde_json::json!({"x": [1.0, 2.0 + 1e-12], "y": null});
        let c: Value = serde_json::json!({"x": [1.0, 2.1], "y": null});
        assert!(values_close(&a, &b, 1e-9));
        assert!(!values_close(&a, &c, 1e-9));
    }
}
