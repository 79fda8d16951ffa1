use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::model::Model;
use crate::harness::params::ParamStore;
use crate::harness::task::Batch;
use crate::tensor::{relative_error, Fault, Rng, Tape};

/// Finite differences get too slow past this many scalars.
pub const MAX_AUDIT_PARAMS: usize = 100_000;

#[derive(Debug, Clone)]
pub struct AuditOptions {
    pub step: f64,
    pub tolerance: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Std of seeded Gaussian noise added to every parameter before the
    /// check. At initialization the generated expert contributes ~1e-6 to
    /// the output, so its gradients sit below the central-difference noise
    /// floor; a jittered point exercises every path at a useful scale.
    pub jitter: f64,
    /// Corrupts one backward rule of the analytic pass.
    pub fault: Option<Fault>,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            batch_size: 4,
            seed: 0,
            jitter: 0.25,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: &'static str,
    pub tensors: usize,
    pub scalars: usize,
    /// Largest per-tensor relative error in the group.
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Total training loss on `batch`; the gate noise stream restarts from
/// `seed` on every call so repeated evaluations see identical noise.
fn loss_at(model: &Model, store: &ParamStore, batch: &Batch, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind_store(&mut tape, store);
    let pass = model.forward(&mut tape, &vars, batch, &mut Rng::new(seed).fork("noise"), true)?;
    Ok(tape.value(pass.total_loss).data()[0])
}

/// Compares backpropagated gradients of the total loss against central
/// differences, tensor by tensor, and reports the worst error per group.
pub fn gradient_audit(model: &Model, opts: &AuditOptions) -> Result<AuditReport> {
    let total = model.num_params();
    if total >= MAX_AUDIT_PARAMS {
        return Err(Error::config(format!(
            "model has {total} parameters; gradient audit needs fewer than {MAX_AUDIT_PARAMS}. \
             Shrink hidden, d_ff, num_experts or the task vocabulary"
        )));
    }
    let batch = model
        .task()
        .generate_task_batch(&mut Rng::new(opts.seed).fork("audit"), opts.batch_size);

    let mut point = model.params().clone();
    if opts.jitter > 0.0 {
        let root = Rng::new(opts.seed).fork("jitter");
        let names: Vec<String> = point.entries().iter().map(|e| e.name.clone()).collect();
        for (tensor, name) in point.tensors_mut().zip(&names) {
            let mut rng = root.fork(name);
            tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += opts.jitter * rng.gaussian());
        }
    }

    let mut tape = match opts.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let vars = model.bind_store(&mut tape, &point);
    let pass = model.forward(
        &mut tape,
        &vars,
        &batch,
        &mut Rng::new(opts.seed).fork("noise"),
        true,
    )?;
    tape.backward(pass.total_loss)?;

    let mut work = point.clone();
    let mut groups: Vec<GroupCheck> = Vec::new();
    for (i, entry) in point.entries().iter().enumerate() {
        let analytic = match tape.grad(vars[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; entry.tensor.numel()],
        };
        let id = work.id(&entry.name).unwrap();
        let mut numeric = vec![0.0; entry.tensor.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.step;
            let up = loss_at(model, &work, &batch, opts.seed)?;
            work.get_mut(id).data_mut()[j] = orig - opts.step;
            let down = loss_at(model, &work, &batch, opts.seed)?;
            work.get_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * opts.step);
        }
        let err = relative_error(&analytic, &numeric);
        match groups.iter_mut().find(|g| g.group == entry.group) {
            Some(g) => {
                g.tensors += 1;
                g.scalars += entry.tensor.numel();
                if err > g.max_rel_error || err.is_nan() {
                    g.max_rel_error = err;
                    g.worst_tensor = entry.name.clone();
                }
            }
            None => groups.push(GroupCheck {
                group: entry.group,
                tensors: 1,
                scalars: entry.tensor.numel(),
                max_rel_error: err,
                worst_tensor: entry.name.clone(),
                passed: false,
            }),
        }
    }
    for g in &mut groups {
        g.passed = g.max_rel_error < opts.tolerance;
    }
    Ok(AuditReport {
        tolerance: opts.tolerance,
        groups,
    })
}
