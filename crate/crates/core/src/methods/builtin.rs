use super::{
    bank_seed, fresh_mlp_seed, mlp_seed, pass_seed, D1Mode, DataRef, MethodParams, MethodRegistry,
    Plan, Schedule, Step, TrainingMethod,
};
use crate::error::{Error, Result};

/// Bank slot that holds the frozen first-dataset snapshot.
const SNAPSHOT_BANK: usize = 0;

pub(super) fn register_all(r: &mut MethodRegistry) {
    r.register(Box::new(Direct));
    r.register(Box::new(MedaNc { name: "meda_nc" }));
    r.register(Box::new(MedaNc { name: "emb_reinit" }));
    r.register(Box::new(MedaC));
    for (name, emb, mlp) in [
        ("emb_fix", FreezeWhen::Always, FreezeWhen::Never),
        ("mlp_fix", FreezeWhen::Never, FreezeWhen::Always),
        ("emb_fix_after_1", FreezeWhen::AfterFirst, FreezeWhen::Never),
        ("mlp_fix_after_1", FreezeWhen::Never, FreezeWhen::AfterFirst),
    ] {
        r.register(Box::new(Freezing { name, emb, mlp }));
    }
    r.register(Box::new(SameInit {
        target: SameInitTarget::Embedding,
    }));
    r.register(Box::new(SameInit {
        target: SameInitTarget::Mlp,
    }));
    r.register(Box::new(ReinitMlp));
    r.register(Box::new(D1EmbAsInitial {
        name: "d1_emb_as_initial",
    }));
    r.register(Box::new(D1EmbAsInitial {
        name: "medac_emb_reuse",
    }));
    r.register(Box::new(D1EmbAsFixed));
    r.register(Box::new(MultiMlp));
    for (name, kind) in [
        ("medac_reversed_order", OrderKind::Reversed),
        ("medac_omit_even", OrderKind::OmitEven),
        ("medac_omit_odd", OrderKind::OmitOdd),
    ] {
        r.register(Box::new(MedaCOrder { name, kind }));
    }
}

fn check_k(p: &MethodParams) -> Result<()> {
    if p.k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    Ok(())
}

fn train(data: DataRef, bank_id: usize, epoch: usize, seed: u64) -> Step {
    Step::Train {
        data,
        bank_id,
        epoch,
        pass_seed: seed,
        train_embedding: true,
        train_mlp: true,
    }
}

fn begin(name: &str, p: &MethodParams) -> Plan {
    let mut plan = Plan::new(name);
    plan.push(Step::InitMlp {
        seed: mlp_seed(p.base_seed),
    });
    plan
}

pub struct Direct;

impl TrainingMethod for Direct {
    fn name(&self) -> &'static str {
        "direct"
    }
    fn description(&self) -> &'static str {
        "same MLP and embedding trained for k consecutive epochs"
    }
    fn continual(&self) -> bool {
        false
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        check_k(p)?;
        let mut plan = begin(self.name(), p);
        plan.push(Step::InitBank {
            bank_id: 1,
            seed: bank_seed(p.base_seed, 1),
        });
        for e in 1..=p.k {
            plan.push(train(DataRef::Full, 1, e, pass_seed(p.base_seed, 1, e)));
        }
        Ok(plan)
    }
}

/// Non-continual MEDA: epoch `r` trains a fresh bank `r` with the carried MLP.
pub struct MedaNc {
    pub name: &'static str,
}

impl TrainingMethod for MedaNc {
    fn name(&self) -> &'static str {
        self.name
    }
    fn description(&self) -> &'static str {
        "embedding re-initialized at every epoch start, MLP carried forward"
    }
    fn continual(&self) -> bool {
        false
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        check_k(p)?;
        let mut plan = begin(self.name, p);
        for r in 1..=p.k {
            if r > 1 {
                plan.push(Step::DropBank { bank_id: r - 1 });
            }
            plan.push(Step::InitBank {
                bank_id: r,
                seed: bank_seed(p.base_seed, r),
            });
            plan.push(train(DataRef::Full, r, r, pass_seed(p.base_seed, 1, r)));
        }
        Ok(plan)
    }
}

/// Continual plan over `schedule`; `mlp_reset(t, r)` may request a fresh MLP
/// right before pass `(t, r)`.
fn meda_c_plan(
    name: &str,
    p: &MethodParams,
    schedule: &Schedule,
    mlp_reset: impl Fn(usize, usize) -> Option<u64>,
) -> Plan {
    let mut plan = begin(name, p);
    for r in 1..=schedule.k {
        plan.push(Step::InitBank {
            bank_id: r,
            seed: bank_seed(p.base_seed, r),
        });
    }
    let mut passes_on = vec![0usize; schedule.num_datasets + 1];
    for &(t, r) in &schedule.passes {
        if let Some(seed) = mlp_reset(t, r) {
            plan.push(Step::InitMlp { seed });
        }
        passes_on[t] += 1;
        plan.push(train(
            DataRef::Part(t),
            r,
            passes_on[t],
            pass_seed(p.base_seed, t, r),
        ));
    }
    plan
}

fn continual_schedule(p: &MethodParams) -> Result<Schedule> {
    check_k(p)?;
    if p.num_datasets < 1 {
        return Err(Error::Config("continual methods need >= 1 dataset".into()));
    }
    match &p.schedule {
        Some(s) => {
            if s.k != p.k || s.num_datasets != p.num_datasets {
                return Err(Error::Config(format!(
                    "schedule is for k={}, T={} but run uses k={}, T={}",
                    s.k, s.num_datasets, p.k, p.num_datasets
                )));
            }
            Schedule::new(s.k, s.num_datasets, s.passes.clone())
        }
        None => Ok(Schedule::full(p.k, p.num_datasets)),
    }
}

pub struct MedaC;

impl TrainingMethod for MedaC {
    fn name(&self) -> &'static str {
        "meda_c"
    }
    fn description(&self) -> &'static str {
        "k independently seeded banks, each trained at most once per dataset"
    }
    fn continual(&self) -> bool {
        true
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        let schedule = continual_schedule(p)?;
        Ok(meda_c_plan(self.name(), p, &schedule, |_, _| None))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeWhen {
    Never,
    Always,
    AfterFirst,
}

impl FreezeWhen {
    fn trains(self, epoch: usize) -> bool {
        match self {
            FreezeWhen::Never => true,
            FreezeWhen::Always => false,
            FreezeWhen::AfterFirst => epoch == 1,
        }
    }
}

/// Direct training with the embedding and/or MLP held fixed.
pub struct Freezing {
    pub name: &'static str,
    pub emb: FreezeWhen,
    pub mlp: FreezeWhen,
}

impl TrainingMethod for Freezing {
    fn name(&self) -> &'static str {
        self.name
    }
    fn description(&self) -> &'static str {
        "direct multi-epoch training with one parameter group frozen"
    }
    fn continual(&self) -> bool {
        false
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        check_k(p)?;
        let mut plan = begin(self.name, p);
        plan.push(Step::InitBank {
            bank_id: 1,
            seed: bank_seed(p.base_seed, 1),
        });
        for e in 1..=p.k {
            plan.push(Step::Train {
                data: DataRef::Full,
                bank_id: 1,
                epoch: e,
                pass_seed: pass_seed(p.base_seed, 1, e),
                train_embedding: self.emb.trains(e),
                train_mlp: self.mlp.trains(e),
            });
        }
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SameInitTarget {
    Embedding,
    Mlp,
}

/// Re-initializes one group to the identical starting values every epoch.
pub struct SameInit {
    pub target: SameInitTarget,
}

impl TrainingMethod for SameInit {
    fn name(&self) -> &'static str {
        match self.target {
            SameInitTarget::Embedding => "emb_same_init",
            SameInitTarget::Mlp => "mlp_same_init",
        }
    }
    fn description(&self) -> &'static str {
        "one parameter group reset to the same initial values each epoch"
    }
    fn continual(&self) -> bool {
        false
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        check_k(p)?;
        let mut plan = begin(self.name(), p);
        let bank = Step::InitBank {
            bank_id: 1,
            seed: bank_seed(p.base_seed, 1),
        };
        plan.push(bank.clone());
        for e in 1..=p.k {
            if e > 1 {
                plan.push(match self.target {
                    SameInitTarget::Embedding => bank.clone(),
                    SameInitTarget::Mlp => Step::InitMlp {
                        seed: mlp_seed(p.base_seed),
                    },
                });
            }
            plan.push(train(DataRef::Full, 1, e, pass_seed(p.base_seed, 1, e)));
        }
        Ok(plan)
    }
}

/// Independently re-drawn MLP each epoch; the embedding is carried.
pub struct ReinitMlp;

impl TrainingMethod for ReinitMlp {
    fn name(&self) -> &'static str {
        "mlp_reinit"
    }
    fn description(&self) -> &'static str {
        "MLP independently re-initialized at every epoch start"
    }
    fn continual(&self) -> bool {
        false
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        check_k(p)?;
        let mut plan = begin(self.name(), p);
        plan.push(Step::InitBank {
            bank_id: 1,
            seed: bank_seed(p.base_seed, 1),
        });
        for e in 1..=p.k {
            if e > 1 {
                plan.push(Step::InitMlp {
                    seed: fresh_mlp_seed(p.base_seed, e),
                });
            }
            plan.push(train(DataRef::Full, 1, e, pass_seed(p.base_seed, 1, e)));
        }
        Ok(plan)
    }
}

fn require_two_datasets(name: &str, p: &MethodParams) -> Result<()> {
    check_k(p)?;
    if p.num_datasets != 2 {
        return Err(Error::Config(format!(
            "{name} is defined for exactly 2 continual datasets, got {}",
            p.num_datasets
        )));
    }
    Ok(())
}

/// Trains the first dataset and returns the bank carried into the second.
fn first_dataset(plan: &mut Plan, p: &MethodParams) -> usize {
    let epochs = match p.d1_mode {
        D1Mode::Once => 1,
        D1Mode::Multi => p.k,
    };
    for r in 1..=epochs {
        if r > 1 {
            plan.push(Step::DropBank { bank_id: r - 1 });
        }
        plan.push(Step::InitBank {
            bank_id: r,
            seed: bank_seed(p.base_seed, r),
        });
        plan.push(train(DataRef::Part(1), r, r, pass_seed(p.base_seed, 1, r)));
    }
    epochs
}

/// The final first-dataset bank seeds direct multi-epoch training of the second.
pub struct D1EmbAsInitial {
    pub name: &'static str,
}

impl TrainingMethod for D1EmbAsInitial {
    fn name(&self) -> &'static str {
        self.name
    }
    fn description(&self) -> &'static str {
        "first-dataset embedding reused as the start of direct multi-epoch training on the second"
    }
    fn continual(&self) -> bool {
        true
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        require_two_datasets(self.name, p)?;
        let mut plan = begin(self.name, p);
        let carried = first_dataset(&mut plan, p);
        for e in 1..=p.k {
            plan.push(train(
                DataRef::Part(2),
                carried,
                e,
                pass_seed(p.base_seed, 2, e),
            ));
        }
        Ok(plan)
    }
}

/// After one joint pass on the second dataset, later passes train only the
/// MLP against the frozen final first-dataset embedding.
pub struct D1EmbAsFixed;

impl TrainingMethod for D1EmbAsFixed {
    fn name(&self) -> &'static str {
        "d1_emb_as_fixed"
    }
    fn description(&self) -> &'static str {
        "second-dataset epochs after the first reuse the frozen first-dataset embedding"
    }
    fn continual(&self) -> bool {
        true
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        require_two_datasets(self.name(), p)?;
        let mut plan = begin(self.name(), p);
        let carried = first_dataset(&mut plan, p);
        plan.push(Step::CopyBank {
            from: carried,
            to: SNAPSHOT_BANK,
        });
        plan.push(train(
            DataRef::Part(2),
            carried,
            1,
            pass_seed(p.base_seed, 2, 1),
        ));
        for e in 2..=p.k {
            plan.push(Step::Train {
                data: DataRef::Part(2),
                bank_id: SNAPSHOT_BANK,
                epoch: e,
                pass_seed: pass_seed(p.base_seed, 2, e),
                train_embedding: false,
                train_mlp: true,
            });
        }
        Ok(plan)
    }
}

/// Continual MEDA in which each bank `r >= 2` meets the first dataset with a
/// freshly drawn MLP; the MLP returned by that pass becomes the carried one.
pub struct MultiMlp;

impl TrainingMethod for MultiMlp {
    fn name(&self) -> &'static str {
        "medac_multi_mlp"
    }
    fn description(&self) -> &'static str {
        "continual MEDA with a new MLP whenever a later bank first trains"
    }
    fn continual(&self) -> bool {
        true
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        let schedule = continual_schedule(p)?;
        let base = p.base_seed;
        Ok(meda_c_plan(self.name(), p, &schedule, |t, r| {
            (t == 1 && r >= 2).then(|| fresh_mlp_seed(base, r))
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderKind {
    Reversed,
    OmitEven,
    OmitOdd,
}

/// Continual MEDA with the bank order of datasets `t >= 2` permuted or filtered.
pub struct MedaCOrder {
    pub name: &'static str,
    pub kind: OrderKind,
}

impl TrainingMethod for MedaCOrder {
    fn name(&self) -> &'static str {
        self.name
    }
    fn description(&self) -> &'static str {
        "continual MEDA with reversed or thinned bank order on later datasets"
    }
    fn continual(&self) -> bool {
        true
    }
    fn plan(&self, p: &MethodParams) -> Result<Plan> {
        check_k(p)?;
        if p.num_datasets < 2 {
            return Err(Error::Config(format!("{} needs >= 2 datasets", self.name)));
        }
        let mut passes = Vec::new();
        for t in 1..=p.num_datasets {
            let banks: Vec<usize> = if t == 1 {
                (1..=p.k).collect()
            } else {
                match self.kind {
                    OrderKind::Reversed => (1..=p.k).rev().collect(),
                    OrderKind::OmitEven => (1..=p.k).filter(|r| r % 2 == 1).collect(),
                    OrderKind::OmitOdd => (1..=p.k).filter(|r| r % 2 == 0).collect(),
                }
            };
            passes.extend(banks.into_iter().map(|r| (t, r)));
        }
        let schedule = Schedule::new(p.k, p.num_datasets, passes)?;
        Ok(meda_c_plan(self.name, p, &schedule, |_, _| None))
    }
}
