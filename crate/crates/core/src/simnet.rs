//! Deterministic discrete-event simulation of a whole training job.
//!
//! Events are ordered by `(time, sequence number)`; every source of
//! randomness is derived from the job seed, so a run is a pure function of
//! its configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::cas::{
    AttestationFailure, Cas, CasError, CodeMeasurement, Owner, OwnerRegistration, Release, Role,
    SecretId, SecretPolicy,
};
use crate::config::{ConfigError, FaultAction, JobConfig};
use crate::costmodel::{CostParams, SimTime};
use crate::crypto::{derive_rng, encrypt, keygen, KeyOwner};
use crate::enclaves::{
    code_identity, measurements, seal_checkpoint, tampered_identity, Action, AdminEnclave,
    AggregatorEnclave, Commit, Enclave, EnclaveError, Env, Inbound, JobContext, MsgType,
    Outgoing, Phase, TaintLabel, TrainingEnclave, WakeKind,
};
use crate::models::{accuracy, make_toy_task, ModelState, ToyTask};
use crate::storage::{BlobKey, BlobStore, MemoryStore, Namespace};
use crate::tensors::GradVector;

pub const METRICS_HEADER: &str = "iteration,enclave_id,phase,duration,bytes_sent,bytes_recv,messages";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("privacy violation at t={time}: {detail}")]
    PrivacyViolation { time: SimTime, detail: String },
    #[error("attestation of {enclave} failed: {reason}")]
    Attestation {
        enclave: String,
        reason: String,
        /// Every secret the CAS released before the job was abandoned.
        releases: Vec<Release>,
        denials: Vec<CasError>,
    },
    #[error("{enclave} failed at t={time}: {source}")]
    Enclave {
        enclave: String,
        time: SimTime,
        source: EnclaveError,
    },
    #[error("gave up after {0} iteration restarts")]
    TooManyRestarts(u64),
    #[error("simulation stalled at t={time} in iteration {iteration}")]
    Stalled { time: SimTime, iteration: u64 },
    #[error("setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub enclave_id: String,
    pub phase: Phase,
    pub duration: SimTime,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub messages: u64,
}

fn sort_key(r: &MetricsRecord) -> (u64, &str, &'static str) {
    (r.iteration, r.enclave_id.as_str(), r.phase.as_str())
}

/// CSV with [`METRICS_HEADER`], rows sorted by iteration, enclave, phase.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut rows: Vec<&MetricsRecord> = records.iter().collect();
    rows.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.enclave_id, r.phase, r.duration, r.bytes_sent, r.bytes_recv, r.messages
        );
    }
    out
}

pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> io::Result<()> {
    std::fs::write(path, metrics_csv(records))
}

/// One message delivery, as seen by the test-build label hook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaintRecord {
    pub time: SimTime,
    pub iteration: u64,
    pub from: String,
    pub to: String,
    pub to_role: Role,
    pub msg_type: MsgType,
    pub label: TaintLabel,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationSpan {
    pub iteration: u64,
    pub attempt: u64,
    pub begin: SimTime,
    pub end: SimTime,
}

impl IterationSpan {
    pub fn duration(&self) -> SimTime {
        self.end - self.begin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRecord {
    pub iteration: u64,
    pub attempt: u64,
    pub participants: Vec<usize>,
    pub aggregate: GradVector,
    pub label: TaintLabel,
    /// The model the aggregate was computed against.
    pub model_before: ModelState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestartRecord {
    pub time: SimTime,
    pub iteration: u64,
    pub attempt: u64,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveSummary {
    pub id: String,
    pub role: Role,
    pub measurement: CodeMeasurement,
    pub held_secrets: BTreeSet<SecretId>,
    pub retired: bool,
}

pub struct JobResult {
    pub config: JobConfig,
    pub task: ToyTask,
    pub final_state: ModelState,
    /// The final checkpoint exactly as stored (encrypted).
    pub final_model_blob: Vec<u8>,
    pub accuracy: f64,
    pub metrics: Vec<MetricsRecord>,
    pub releases: Vec<Release>,
    pub attestation_failures: Vec<AttestationFailure>,
    pub denials: Vec<CasError>,
    pub taint_log: Vec<TaintRecord>,
    pub aggregates: Vec<AggregateRecord>,
    pub spans: Vec<IterationSpan>,
    pub restarts: Vec<RestartRecord>,
    pub enclaves: Vec<EnclaveSummary>,
    /// Ordered log of every event the simulator processed.
    pub trace: Vec<String>,
    pub total_time: SimTime,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub bytes_in_flight: u64,
    pub stale_events: u64,
    pub cas: Cas,
    pub store: Arc<dyn BlobStore>,
}

impl JobResult {
    pub fn final_checkpoint(&self) -> Vec<u8> {
        self.final_state.to_checkpoint()
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn model_versions(&self) -> Vec<BlobKey> {
        self.store.list(&Namespace::Model).unwrap_or_default()
    }

    pub fn provisioning_log(&self) -> String {
        let mut out = String::from("enclave,role,secret,rule\n");
        for r in &self.releases {
            let _ = writeln!(out, "{},{},{},{}", r.enclave_id, r.role, r.secret, r.rule);
        }
        for f in &self.attestation_failures {
            let _ = writeln!(out, "{},{},attestation-failed,{}", f.enclave_id, f.role, f.reason);
        }
        out
    }

    pub fn taint_log_csv(&self) -> String {
        let mut out = String::from("time,iteration,from,to,type,label,bytes\n");
        for t in &self.taint_log {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.time, t.iteration, t.from, t.to, t.msg_type, t.label, t.bytes
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "mode={} n={} iterations={} accuracy={:.4} simulated_time={}",
            self.config.mode,
            self.config.n_training,
            self.spans.len(),
            self.accuracy,
            self.total_time
        )
    }
}

/// Cost-model parameters matching what the simulator charges for `cfg`.
pub fn cost_params(cfg: &JobConfig) -> Result<CostParams, SimError> {
    cfg.validate()?;
    Ok(JobContext::new(cfg.clone())
        .map_err(|e| SimError::Setup(e.to_string()))?
        .costs)
}

pub fn run_job(cfg: &JobConfig) -> Result<JobResult, SimError> {
    run_job_with_store(cfg, Arc::new(MemoryStore::new()))
}

pub fn run_job_with_store(cfg: &JobConfig, store: Arc<dyn BlobStore>) -> Result<JobResult, SimError> {
    cfg.validate()?;
    let mut sim = Sim::setup(cfg, store)?;
    sim.run()?;
    sim.finish()
}

// ---------------------------------------------------------------------------

#[derive(Debug)]
enum Event {
    Emit {
        from: Role,
        incarnation: u64,
        out: Outgoing,
    },
    Deliver {
        to: Role,
        from: Role,
        from_id: String,
        out: Outgoing,
    },
    Wake {
        role: Role,
        incarnation: u64,
        step: u64,
        attempt: u64,
        kind: WakeKind,
    },
    Crash {
        target: Role,
        step: u64,
    },
}

#[derive(Debug, Default, Clone, Copy)]
struct Counter {
    sent: u64,
    recv: u64,
    messages: u64,
}

struct Sim {
    ctx: Arc<JobContext>,
    task: ToyTask,
    store: Arc<dyn BlobStore>,
    cas: Cas,
    trainers: Vec<TrainingEnclave>,
    aggregator: AggregatorEnclave,
    admin: Option<AdminEnclave>,
    incarnations: BTreeMap<Role, u64>,
    now: SimTime,
    seq: u64,
    queue: BTreeMap<(SimTime, u64), Event>,
    /// Last delivery time per channel, for FIFO order.
    channels: BTreeMap<(Role, Role), SimTime>,
    step: u64,
    attempt: u64,
    begins: BTreeMap<(u64, u64), SimTime>,
    crashes_armed: BTreeSet<u64>,
    counters: BTreeMap<(u64, String, Phase), Counter>,
    durations: BTreeMap<(u64, String, Phase), SimTime>,
    taint_log: Vec<TaintRecord>,
    aggregates: Vec<AggregateRecord>,
    spans: Vec<IterationSpan>,
    restarts: Vec<RestartRecord>,
    retired: Vec<EnclaveSummary>,
    trace: Vec<String>,
    stale_events: u64,
    bytes_sent: u64,
    bytes_recv: u64,
    final_commit: Option<Commit>,
}

fn enclave_id(role: Role, incarnation: u64) -> String {
    format!("{role}@{incarnation}")
}

fn summary_of(e: &dyn Enclave, retired: bool) -> EnclaveSummary {
    let s = e.state();
    EnclaveSummary {
        id: s.id.clone(),
        role: s.role,
        measurement: s.measurement,
        held_secrets: s.held_secrets.clone(),
        retired,
    }
}

impl Sim {
    /// Steps one to three of the workflow: owners register with the CAS,
    /// upload encrypted data and the initial model, and the enclaves are
    /// attested and provisioned.
    fn setup(cfg: &JobConfig, store: Arc<dyn BlobStore>) -> Result<Self, SimError> {
        let ctx = Arc::new(JobContext::new(cfg.clone()).map_err(|e| SimError::Setup(e.to_string()))?);
        let task = make_toy_task(cfg.seed, &cfg.task_config())
            .map_err(|e| SimError::Setup(e.to_string()))?;
        if task.batches_per_epoch() != cfg.batches_per_epoch {
            return Err(SimError::Setup(format!(
                "task has {} batches per epoch, config asks for {}",
                task.batches_per_epoch(),
                cfg.batches_per_epoch
            )));
        }
        let n = cfg.n_training;
        let seed = cfg.seed;
        let setup_err = |e: &dyn std::fmt::Display| SimError::Setup(e.to_string());

        let mut cas = Cas::new();
        let policy = SecretPolicy::standard(n, &measurements());
        for (i, shard) in task.shards.iter().enumerate() {
            let mut rng = derive_rng(seed, &format!("owner:data-{i}"));
            let key = keygen(KeyOwner::DataOwner(i), &mut rng);
            cas.register_owner(OwnerRegistration {
                owner: Owner::Data(i),
                keys: vec![(SecretId::DataKey(i), key.clone())],
                approvals: policy.approved_by(Owner::Data(i)),
            })
            .map_err(|e| setup_err(&e))?;
            for (b, batch) in shard.iter().enumerate() {
                let blob = encrypt(&key, &batch.to_bytes(), &mut rng);
                store
                    .put(BlobKey::data(i, b as u64), &blob)
                    .map_err(|e| setup_err(&e))?;
            }
        }
        let mut rng = derive_rng(seed, "owner:model");
        let model_key = keygen(KeyOwner::ModelOwner, &mut rng);
        cas.register_owner(OwnerRegistration {
            owner: Owner::Model,
            keys: vec![(SecretId::ModelKey, model_key.clone())],
            approvals: policy.approved_by(Owner::Model),
        })
        .map_err(|e| setup_err(&e))?;
        let initial = ctx.spec.initial_state();
        store
            .put(BlobKey::model(0, 0), &seal_checkpoint(seed, &model_key, &initial))
            .map_err(|e| setup_err(&e))?;

        let mut roles = vec![Role::Aggregator];
        if cfg.mode.uses_masks() {
            roles.push(Role::Admin);
        }
        roles.extend((0..n).map(Role::Training));
        for &role in &roles {
            let tampered = cfg
                .faults
                .iter()
                .any(|f| f.target == role && f.action == FaultAction::Tamper);
            let identity = if tampered {
                tampered_identity(role)
            } else {
                code_identity(role)
            };
            let id = enclave_id(role, 0);
            if let Err(e) = cas.attest(&id, role, identity.measure()) {
                // the enclave still asks for its secrets; every request is denied
                let _ = cas.provision(&id, &SecretId::ModelKey);
                if let Role::Training(i) = role {
                    let _ = cas.provision(&id, &SecretId::DataKey(i));
                }
                return Err(SimError::Attestation {
                    enclave: id,
                    reason: e.to_string(),
                    releases: cas.releases().to_vec(),
                    denials: cas.denials().to_vec(),
                });
            }
        }

        let launch_err = |id: &str, e: EnclaveError| SimError::Enclave {
            enclave: id.to_owned(),
            time: 0,
            source: e,
        };
        let meas = measurements();
        let agg_id = enclave_id(Role::Aggregator, 0);
        let aggregator = AggregatorEnclave::launch(&agg_id, meas.aggregator, Arc::clone(&ctx), &mut cas)
            .map_err(|e| launch_err(&agg_id, e))?;
        let admin = if cfg.mode.uses_masks() {
            let id = enclave_id(Role::Admin, 0);
            Some(
                AdminEnclave::launch(&id, meas.admin, Arc::clone(&ctx), &*store, &mut cas)
                    .map_err(|e| launch_err(&id, e))?,
            )
        } else {
            None
        };
        let mut trainers = Vec::with_capacity(n);
        for i in 0..n {
            let id = enclave_id(Role::Training(i), 0);
            trainers.push(
                TrainingEnclave::launch(&id, i, meas.training, Arc::clone(&ctx), &mut cas)
                    .map_err(|e| launch_err(&id, e))?,
            );
        }
        Ok(Self {
            incarnations: roles.iter().map(|&r| (r, 0)).collect(),
            ctx,
            task,
            store,
            cas,
            trainers,
            aggregator,
            admin,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            channels: BTreeMap::new(),
            step: 0,
            attempt: 0,
            begins: BTreeMap::new(),
            crashes_armed: BTreeSet::new(),
            counters: BTreeMap::new(),
            durations: BTreeMap::new(),
            taint_log: Vec::new(),
            aggregates: Vec::new(),
            spans: Vec::new(),
            restarts: Vec::new(),
            retired: Vec::new(),
            trace: Vec::new(),
            stale_events: 0,
            bytes_sent: 0,
            bytes_recv: 0,
            final_commit: None,
        })
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), event);
    }

    fn roles(&self) -> Vec<Role> {
        let mut roles = vec![Role::Aggregator];
        if self.admin.is_some() {
            roles.push(Role::Admin);
        }
        roles.extend((0..self.trainers.len()).map(Role::Training));
        roles
    }

    fn actor(&self, role: Role) -> Option<&dyn Enclave> {
        match role {
            Role::Training(i) => self.trainers.get(i).map(|t| t as &dyn Enclave),
            Role::Aggregator => Some(&self.aggregator),
            Role::Admin => self.admin.as_ref().map(|a| a as &dyn Enclave),
        }
    }

    /// Runs one actor callback and turns its actions into events.
    fn call<F>(&mut self, role: Role, f: F) -> Result<(), SimError>
    where
        F: FnOnce(&mut dyn Enclave, &mut Env) -> Result<(), EnclaveError>,
    {
        let mut actions = Vec::new();
        let store = Arc::clone(&self.store);
        let result = {
            let mut env = Env {
                now: self.now,
                store: &*store,
                cas: &mut self.cas,
                actions: &mut actions,
            };
            let actor: &mut dyn Enclave = match role {
                Role::Training(i) => &mut self.trainers[i],
                Role::Aggregator => &mut self.aggregator,
                Role::Admin => self.admin.as_mut().expect("admin exists in mask modes"),
            };
            f(actor, &mut env)
        };
        let id = self.actor(role).expect("actor exists").state().id.clone();
        if let Err(e) = result {
            return Err(match e {
                EnclaveError::Privacy(detail) => SimError::PrivacyViolation {
                    time: self.now,
                    detail,
                },
                source => SimError::Enclave {
                    enclave: id,
                    time: self.now,
                    source,
                },
            });
        }
        let incarnation = self.incarnations[&role];
        for action in actions {
            match action {
                Action::Send(out) => {
                    let at = out.at.max(self.now);
                    self.schedule(
                        at,
                        Event::Emit {
                            from: role,
                            incarnation,
                            out,
                        },
                    );
                }
                Action::Wake { at, kind } => {
                    let s = self.actor(role).expect("actor exists").state();
                    let (step, attempt) = (s.step, s.attempt);
                    self.schedule(
                        at.max(self.now),
                        Event::Wake {
                            role,
                            incarnation,
                            step,
                            attempt,
                            kind,
                        },
                    );
                }
                Action::Begun { step, attempt } => {
                    self.trace.push(format!("{} begin {id} {step}.{attempt}", self.now));
                    if matches!(role, Role::Training(_)) {
                        self.begins.entry((step, attempt)).or_insert(self.now);
                        if attempt == 0 && self.crashes_armed.insert(step) {
                            self.arm_crashes(step);
                        }
                    }
                }
                Action::Committed(commit) => self.on_commit(*commit)?,
                Action::Abort { reason } => {
                    self.trace.push(format!("{} abort {reason}", self.now));
                    self.restart(reason, None)?;
                }
            }
        }
        Ok(())
    }

    fn arm_crashes(&mut self, step: u64) {
        let crashes: Vec<(Role, SimTime)> = self
            .ctx
            .cfg
            .faults
            .iter()
            .filter(|f| f.iteration == step && f.action == FaultAction::Crash)
            .map(|f| (f.target, f.offset.unwrap_or(self.ctx.costs.t_train / 2)))
            .collect();
        for (target, offset) in crashes {
            self.schedule(self.now + offset, Event::Crash { target, step });
        }
    }

    fn begin_all(&mut self) -> Result<(), SimError> {
        let (step, attempt) = (self.step, self.attempt);
        for role in self.roles() {
            self.call(role, |a, env| a.begin(env, step, attempt))?;
        }
        Ok(())
    }

    fn run(&mut self) -> Result<(), SimError> {
        self.begin_all()?;
        while self.final_commit.is_none() {
            let Some(((at, seq), event)) = self.queue.pop_first() else {
                return Err(SimError::Stalled {
                    time: self.now,
                    iteration: self.step,
                });
            };
            self.now = at;
            self.handle(seq, event)?;
        }
        Ok(())
    }

    fn handle(&mut self, seq: u64, event: Event) -> Result<(), SimError> {
        let now = self.now;
        match event {
            Event::Emit {
                from,
                incarnation,
                out,
            } => {
                let Some(sender) = self.actor(from) else {
                    return Ok(());
                };
                if self.incarnations[&from] != incarnation {
                    self.stale_events += 1;
                    self.trace.push(format!("{now} #{seq} lost emit from {from}"));
                    return Ok(());
                }
                let s = sender.state();
                let (from_id, step) = (s.id.clone(), s.step);
                let phase = sender.phase_at(now);
                let bytes = out.frame.len() as u64;
                let c = self.counters.entry((step, from_id.clone(), phase)).or_default();
                c.sent += bytes;
                c.messages += 1;
                self.bytes_sent += bytes;
                let earliest = now + self.ctx.costs.net.at(out.logical);
                let channel = self.channels.entry((from, out.to)).or_insert(0);
                let at = earliest.max(*channel);
                *channel = at;
                self.trace.push(format!(
                    "{now} #{seq} send {from_id}->{} {} {} {bytes}B arrives {at}",
                    out.to, out.msg_type, out.label
                ));
                self.schedule(
                    at,
                    Event::Deliver {
                        to: out.to,
                        from,
                        from_id,
                        out,
                    },
                );
            }
            Event::Deliver {
                to,
                from,
                from_id,
                out,
            } => {
                let Some(receiver) = self.actor(to) else {
                    return Err(SimError::Setup(format!("message for missing {to}")));
                };
                let to_id = receiver.state().id.clone();
                let bytes = out.frame.len() as u64;
                self.taint_log.push(TaintRecord {
                    time: now,
                    iteration: receiver.state().step,
                    from: from_id.clone(),
                    to: to_id.clone(),
                    to_role: to,
                    msg_type: out.msg_type,
                    label: out.label.clone(),
                    bytes,
                });
                self.trace.push(format!(
                    "{now} #{seq} deliver {from_id}->{to_id} {} {}",
                    out.msg_type, out.label
                ));
                self.bytes_recv += bytes;
                let inbound = Inbound {
                    from,
                    from_id,
                    label: out.label,
                    frame: out.frame,
                };
                self.call(to, |a, env| a.on_message(env, inbound))?;
                let receiver = self.actor(to).expect("actor exists");
                let key = (receiver.state().step, to_id, receiver.phase_at(now));
                let c = self.counters.entry(key).or_default();
                c.recv += bytes;
                c.messages += 1;
            }
            Event::Wake {
                role,
                incarnation,
                step,
                attempt,
                kind,
            } => {
                let s = self.actor(role).expect("actor exists").state();
                if self.incarnations[&role] != incarnation || s.step != step || s.attempt != attempt {
                    self.stale_events += 1;
                    return Ok(());
                }
                self.trace.push(format!("{now} #{seq} wake {} {kind:?}", s.id));
                self.call(role, |a, env| a.on_wake(env, kind))?;
            }
            Event::Crash { target, step } => {
                if step != self.step {
                    self.trace.push(format!("{now} #{seq} crash of {target} skipped"));
                    return Ok(());
                }
                self.trace.push(format!("{now} #{seq} crash {target}"));
                self.restart(format!("crash of {target}"), Some(target))?;
            }
        }
        Ok(())
    }

    /// Restarts the current iteration. A crashed training enclave is
    /// replaced alone, a crashed aggregator or admin takes every enclave
    /// down with it; `None` keeps every enclave.
    fn restart(&mut self, cause: String, replace: Option<Role>) -> Result<(), SimError> {
        self.attempt += 1;
        self.restarts.push(RestartRecord {
            time: self.now,
            iteration: self.step,
            attempt: self.attempt,
            cause,
        });
        if self.restarts.len() as u64 > self.ctx.cfg.max_restarts {
            return Err(SimError::TooManyRestarts(self.ctx.cfg.max_restarts));
        }
        match replace {
            Some(Role::Training(i)) => {
                let role = Role::Training(i);
                self.retired.push(summary_of(&self.trainers[i], true));
                let id = self.next_id(role);
                self.trainers[i] = self.launch_training(&id, i)?;
                if let Some(admin) = self.admin.as_mut() {
                    admin.rebind(i, &id);
                }
                self.begin_all()
            }
            Some(_) => {
                // aggregator or admin lost: the whole cluster restarts
                self.relaunch_all()?;
                self.begin_all()
            }
            None => self.begin_all(),
        }
    }

    fn next_id(&mut self, role: Role) -> String {
        let inc = self.incarnations.get_mut(&role).expect("known role");
        *inc += 1;
        enclave_id(role, *inc)
    }

    fn attest(&mut self, id: &str, role: Role) -> Result<CodeMeasurement, SimError> {
        let m = code_identity(role).measure();
        self.cas.attest(id, role, m).map_err(|e| SimError::Attestation {
            enclave: id.to_owned(),
            reason: e.to_string(),
            releases: self.cas.releases().to_vec(),
            denials: self.cas.denials().to_vec(),
        })?;
        Ok(m)
    }

    fn launch_training(&mut self, id: &str, i: usize) -> Result<TrainingEnclave, SimError> {
        let m = self.attest(id, Role::Training(i))?;
        TrainingEnclave::launch(id, i, m, Arc::clone(&self.ctx), &mut self.cas).map_err(|e| {
            SimError::Enclave {
                enclave: id.to_owned(),
                time: self.now,
                source: e,
            }
        })
    }

    fn relaunch_all(&mut self) -> Result<(), SimError> {
        let enclave_err = |id: &str, time, e| SimError::Enclave {
            enclave: id.to_owned(),
            time,
            source: e,
        };
        self.retired.push(summary_of(&self.aggregator, true));
        let id = self.next_id(Role::Aggregator);
        let m = self.attest(&id, Role::Aggregator)?;
        self.aggregator = AggregatorEnclave::launch(&id, m, Arc::clone(&self.ctx), &mut self.cas)
            .map_err(|e| enclave_err(&id, self.now, e))?;
        if let Some(old) = self.admin.take() {
            self.retired.push(summary_of(&old, true));
            let id = self.next_id(Role::Admin);
            let m = self.attest(&id, Role::Admin)?;
            self.admin = Some(
                AdminEnclave::recover(&id, m, Arc::clone(&self.ctx), self.step, &mut self.cas)
                    .map_err(|e| enclave_err(&id, self.now, e))?,
            );
        }
        for i in 0..self.trainers.len() {
            self.retired.push(summary_of(&self.trainers[i], true));
            let id = self.next_id(Role::Training(i));
            self.trainers[i] = self.launch_training(&id, i)?;
        }
        Ok(())
    }

    fn on_commit(&mut self, c: Commit) -> Result<(), SimError> {
        let end = self.now;
        let begin = self
            .begins
            .get(&(c.step, c.attempt))
            .copied()
            .unwrap_or(self.aggregator.state.begun_at);
        self.trace.push(format!(
            "{end} commit {}.{} version {} participants {:?}",
            c.step, c.attempt, c.version, c.participants
        ));
        self.spans.push(IterationSpan {
            iteration: c.step,
            attempt: c.attempt,
            begin,
            end,
        });
        for role in self.roles() {
            let actor = self.actor(role).expect("actor exists");
            let id = actor.state().id.clone();
            for (phase, d) in actor.breakdown(begin, end) {
                self.durations.insert((c.step, id.clone(), phase), d);
            }
        }
        let model_before = self.model_at(c.step);
        self.aggregates.push(AggregateRecord {
            iteration: c.step,
            attempt: c.attempt,
            participants: c.participants.clone(),
            aggregate: c.aggregate.clone(),
            label: c.label.clone(),
            model_before,
        });
        if c.step + 1 >= self.ctx.cfg.iterations() {
            self.final_commit = Some(c);
            return Ok(());
        }
        self.step = c.step + 1;
        self.attempt = 0;
        let step = self.step;
        self.call(Role::Aggregator, |a, env| a.begin(env, step, 0))
    }

    /// The model iteration `step` started from, read back from storage.
    fn model_at(&mut self, step: u64) -> ModelState {
        let key = self
            .aggregator
            .state
            .secret(&mut self.cas, &SecretId::ModelKey)
            .expect("aggregator holds the model key");
        let blob = self
            .store
            .get(&self.ctx.version_of(step))
            .expect("version exists");
        ModelState::from_checkpoint(&crate::crypto::decrypt(&key, &blob).expect("model key opens it"))
            .expect("valid checkpoint")
    }

    fn finish(self) -> Result<JobResult, SimError> {
        let commit = self.final_commit.expect("run finished");
        let final_model_blob = self
            .store
            .raw(&commit.version)
            .map_err(|e| SimError::Setup(e.to_string()))?;
        let weights = commit.state.weights.to_reals();
        let accuracy = accuracy(&self.ctx.spec, &weights, &self.task.eval);

        let mut keys: BTreeSet<(u64, String, Phase)> = self.durations.keys().cloned().collect();
        keys.extend(self.counters.keys().cloned());
        let metrics = keys
            .into_iter()
            .map(|k| {
                let c = self.counters.get(&k).copied().unwrap_or_default();
                MetricsRecord {
                    duration: self.durations.get(&k).copied().unwrap_or(0),
                    iteration: k.0,
                    enclave_id: k.1,
                    phase: k.2,
                    bytes_sent: c.sent,
                    bytes_recv: c.recv,
                    messages: c.messages,
                }
            })
            .collect();
        let bytes_in_flight = self
            .queue
            .values()
            .map(|e| match e {
                Event::Deliver { out, .. } => out.frame.len() as u64,
                _ => 0,
            })
            .sum();
        let mut enclaves = self.retired.clone();
        enclaves.push(summary_of(&self.aggregator, false));
        if let Some(a) = &self.admin {
            enclaves.push(summary_of(a, false));
        }
        enclaves.extend(self.trainers.iter().map(|t| summary_of(t, false)));
        Ok(JobResult {
            config: self.ctx.cfg.clone(),
            task: self.task,
            final_state: commit.state,
            final_model_blob,
            accuracy,
            metrics,
            releases: self.cas.releases().to_vec(),
            attestation_failures: self.cas.attestation_failures().to_vec(),
            denials: self.cas.denials().to_vec(),
            taint_log: self.taint_log,
            aggregates: self.aggregates,
            spans: self.spans,
            restarts: self.restarts,
            enclaves,
            trace: self.trace,
            total_time: self.now,
            bytes_sent: self.bytes_sent,
            bytes_recv: self.bytes_recv,
            bytes_in_flight,
            stale_events: self.stale_events,
            cas: self.cas,
            store: self.store,
        })
    }
}
