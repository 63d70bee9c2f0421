//! Pluggable converters: group plans, shared-converter execution and the
//! merged model that switches between generation and dense prediction.

use crate::backbone::{
    self, backbone_forward, block_forward, block_param_count, init_block, BlockInit, BlockLayout, ForwardOutput,
    ModelInput, ParamBreakdown, TASK_PATCH,
};
use crate::config::{BackboneConfig, ConverterConfig, ConverterSetting, ExperimentConfig, InitKind};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Rng, Tensor, Var};
use crate::tasks::TaskMode;

/// Contiguous assignment of backbone blocks to converter groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPlan {
    n_groups: usize,
    assignment: Vec<usize>,
    gre: bool,
    stack_n: usize,
}

/// Splits `depth` blocks into `n_groups` contiguous groups whose sizes
/// differ by at most one; the later groups take the remainder.
pub fn make_group_plan(depth: usize, n_groups: usize, gre: bool, stack_n: usize) -> Result<GroupPlan> {
    if n_groups == 0 || n_groups > depth {
        return Err(invalid(format!("n_groups {n_groups} must lie in 1..={depth}")));
    }
    if stack_n == 0 {
        return Err(invalid("stack_n must be at least 1"));
    }
    let (base, rem) = (depth / n_groups, depth % n_groups);
    let mut assignment = Vec::with_capacity(depth);
    for g in 0..n_groups {
        let size = base + usize::from(g >= n_groups - rem);
        assignment.extend(std::iter::repeat_n(g, size));
    }
    Ok(GroupPlan {
        n_groups,
        assignment,
        gre,
        stack_n,
    })
}

impl GroupPlan {
    pub fn from_config(cfg: &ConverterConfig, depth: usize) -> Result<Self> {
        make_group_plan(depth, cfg.groups_for(depth), cfg.gre, cfg.stack_n)
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn gre(&self) -> bool {
        self.gre
    }

    pub fn stack_n(&self) -> usize {
        self.stack_n
    }

    pub fn depth(&self) -> usize {
        self.assignment.len()
    }

    pub fn group_of(&self, block: usize) -> usize {
        self.assignment[block]
    }

    pub fn first_block(&self, group: usize) -> usize {
        self.assignment.iter().position(|&g| g == group).unwrap_or(0)
    }

    pub fn is_first(&self, block: usize) -> bool {
        block == 0 || self.assignment[block - 1] != self.assignment[block]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    /// Converter applications per forward pass.
    pub fn calls_per_forward(&self) -> usize {
        let points = if self.gre { self.depth() } else { self.n_groups };
        points * self.stack_n
    }
}

/// Sub-layers of a converter in `setting`.
pub fn converter_layout(setting: ConverterSetting, expansion: usize) -> BlockLayout {
    let (self_attn, cross_attn, ffn) = match setting {
        ConverterSetting::A => (true, true, Some(expansion)),
        ConverterSetting::B => (true, false, Some(expansion)),
        ConverterSetting::C => (false, false, Some(expansion)),
        ConverterSetting::D => (true, false, None),
        ConverterSetting::E => (true, false, Some(1)),
    };
    BlockLayout {
        self_attn,
        cross_attn,
        ffn_expansion: ffn,
    }
}

/// Exact parameter count of one converter.
pub fn converter_param_count(setting: ConverterSetting, cfg: &BackboneConfig) -> usize {
    block_param_count(converter_layout(setting, cfg.ffn_expansion), cfg.d_model, cfg.d_model)
}

/// Parameters of the task patch embedding.
pub fn task_patch_param_count(cfg: &BackboneConfig) -> usize {
    let d = cfg.d_model;
    cfg.patch_dim(2 * cfg.channels) * d + d + cfg.tokens() * d
}

pub fn converter_prefix(group: usize, slot: usize) -> String {
    format!("converters.{group}.{slot}")
}

/// Converter plan plus setting, as executed inside the backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConverterStack {
    pub plan: GroupPlan,
    pub setting: ConverterSetting,
}

impl ConverterStack {
    pub fn layout(&self, cfg: &BackboneConfig) -> BlockLayout {
        converter_layout(self.setting, cfg.ffn_expansion)
    }

    /// Runs whatever converters precede backbone block `block`, returning the
    /// new tokens and the number of converter applications.
    pub fn before_block<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        cfg: &BackboneConfig,
        block: usize,
        x: Var,
        ctx: Var,
        c: Var,
    ) -> Result<(Var, usize)> {
        if !self.plan.gre && !self.plan.is_first(block) {
            return Ok((x, 0));
        }
        let group = self.plan.group_of(block);
        let layout = self.layout(cfg);
        let mut x = x;
        for slot in 0..self.plan.stack_n {
            x = block_forward(g, &converter_prefix(group, slot), layout, cfg.heads, x, ctx, c)?;
        }
        Ok((x, self.plan.stack_n))
    }
}

/// Adds trainable converter weights for every (group, slot) of `plan`.
///
/// Pretrained init copies each tensor whose name and shape match the first
/// block of the group; the rest (the narrow FFN of setting E) keep their
/// draw from the seeded stream. Random init keeps every draw.
pub fn init_converters(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    plan: &GroupPlan,
    setting: ConverterSetting,
    init: InitKind,
    seed: u64,
) -> Result<()> {
    let layout = converter_layout(setting, cfg.ffn_expansion);
    let root = Rng::new(seed);
    for group in 0..plan.n_groups {
        let source = format!("backbone.blocks.{}", plan.first_block(group));
        for slot in 0..plan.stack_n {
            let prefix = converter_prefix(group, slot);
            let mut fresh = ParamStore::new();
            let mut rng = root.split((group * plan.stack_n + slot) as u64);
            init_block(
                &mut fresh,
                &prefix,
                layout,
                cfg.d_model,
                cfg.d_model,
                BlockInit::Random,
                &mut rng,
                true,
            )?;
            for (name, p) in fresh.iter() {
                let mut tensor = p.tensor.clone();
                if init == InitKind::Pretrained {
                    let src = format!("{source}{}", &name[prefix.len()..]);
                    if let Ok(t) = store.tensor(&src) {
                        if t.shape() == tensor.shape() {
                            tensor = t.clone();
                        }
                    }
                }
                store.insert(name.clone(), tensor, true)?;
            }
        }
    }
    Ok(())
}

/// A backbone together with whatever task machinery has been attached.
///
/// Without converters and task patch this is the plain text-to-image
/// model. [`MergeModel::attach`] freezes the backbone and adds converters
/// and the task patch embedding; [`MergeModel::attach_full_finetune`] adds
/// only the task patch and leaves everything trainable.
#[derive(Clone, Debug)]
pub struct MergeModel {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub converters: Option<ConverterStack>,
}

impl MergeModel {
    /// Fresh, fully trainable backbone.
    pub fn new_backbone(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = backbone::init_backbone(&config.backbone, seed)?;
        Ok(Self {
            config,
            store,
            converters: None,
        })
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.config.backbone
    }

    pub fn has_task_patch(&self) -> bool {
        self.store.contains(&format!("{TASK_PATCH}.weight"))
    }

    fn strip_task_parts(&mut self) {
        let extra: Vec<String> = self
            .store
            .names()
            .filter(|n| !n.starts_with("backbone."))
            .cloned()
            .collect();
        for n in extra {
            self.store.remove(&n);
        }
        self.converters = None;
    }

    /// Freezes the backbone and attaches converters per `config.converters`
    /// plus a fresh task patch embedding. Replaces any earlier attachment.
    pub fn attach(&mut self) -> Result<()> {
        self.strip_task_parts();
        let cfg = self.config.backbone.clone();
        let conv = self.config.converters.clone();
        let plan = GroupPlan::from_config(&conv, cfg.depth)?;
        self.store.set_trainable_prefix("backbone.", false);
        init_converters(&mut self.store, &cfg, &plan, conv.setting, conv.init, conv.init_seed)?;
        backbone::init_task_patch(&mut self.store, &cfg)?;
        self.converters = Some(ConverterStack {
            plan,
            setting: conv.setting,
        });
        Ok(())
    }

    /// Adds the task patch embedding and makes every weight trainable.
    pub fn attach_full_finetune(&mut self) -> Result<()> {
        self.strip_task_parts();
        self.store.set_trainable_prefix("", true);
        backbone::init_task_patch(&mut self.store, &self.config.backbone)
    }

    /// Forward pass on `g`, whose store holds this model's weights (possibly
    /// in another precision).
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        input: &ModelInput<F>,
        mode: TaskMode,
        capture_blocks: bool,
    ) -> Result<ForwardOutput> {
        let converters = match mode {
            TaskMode::Generate => None,
            _ => {
                if !self.has_task_patch() {
                    return Err(Error::Mode(format!("{mode} mode needs attached task weights")));
                }
                self.converters.as_ref()
            }
        };
        backbone_forward(g, &self.config.backbone, input, mode, converters, capture_blocks)
    }

    /// Inference-only prediction.
    pub fn predict(&self, input: &ModelInput, mode: TaskMode) -> Result<Tensor> {
        let mut g = Graph::no_grad(&self.store);
        let out = self.forward(&mut g, input, mode, false)?;
        Ok(g.value(out.prediction).clone())
    }

    pub fn param_counts(&self, trainable_only: bool) -> ParamBreakdown {
        backbone::count_params(&self.store, trainable_only)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_plan() {
        let p = make_group_plan(8, 4, true, 1).unwrap();
        assert_eq!(p.assignment(), &[0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(p.calls_per_forward(), 8);
    }

    #[test]
    fn remainder_goes_last() {
        let p = make_group_plan(8, 3, true, 1).unwrap();
        assert_eq!(p.assignment(), &[0, 0, 1, 1, 1, 2, 2, 2]);
        assert_eq!(p.sizes(), vec![2, 3, 3]);
        assert_eq!(p.first_block(1), 2);
    }

    #[test]
    fn one_per_block() {
        let p = make_group_plan(8, 8, true, 1).unwrap();
        assert_eq!(p.assignment(), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn plan_bounds() {
        assert!(make_group_plan(8, 0, true, 1).is_err());
        assert!(make_group_plan(8, 9, true, 1).is_err());
        assert!(make_group_plan(8, 4, true, 0).is_err());
    }

    #[test]
    fn call_counts() {
        assert_eq!(make_group_plan(8, 4, false, 1).unwrap().calls_per_forward(), 4);
        assert_eq!(make_group_plan(8, 4, true, 2).unwrap().calls_per_forward(), 16);
    }

    #[test]
    fn setting_counts_ordered() {
        let cfg = BackboneConfig::default();
        let n = |s| converter_param_count(s, &cfg);
        use ConverterSetting::*;
        assert!(n(A) > n(B) && n(B) > n(C));
        assert!(n(A) > n(B) && n(B) > n(E) && n(E) > n(D));
        assert_eq!(n(A) - n(B), backbone::cross_attn_param_count(64, 64));
    }
}
