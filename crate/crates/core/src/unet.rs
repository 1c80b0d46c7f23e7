//! Four-level encoder/decoder assembled from per-stage block variants.
//!
//! Stage order is E1, E2, E3, B, D3, D2, D1, R. Parameters live in one store
//! with names `stem/w`, `down{i}/w`, `up{i}/w`, `fuse{i}/w`, `output/w` and
//! `stage{i}/block{j}/...`.

use std::fmt;

use ens_tensor::{Ctx, Graph, NodeId, ParamId, ParamStore, Rng, Shape, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, BlockKind, Stage, StageVariant, VariantKind};
use crate::{EnsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    E1,
    E2,
    E3,
    B,
    D3,
    D2,
    D1,
    R,
}

impl StageId {
    pub const ALL: [StageId; 8] = [
        StageId::E1,
        StageId::E2,
        StageId::E3,
        StageId::B,
        StageId::D3,
        StageId::D2,
        StageId::D1,
        StageId::R,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Channel multiple of the base width.
    pub fn width_factor(self) -> usize {
        match self {
            StageId::E1 => 1,
            StageId::E2 | StageId::D2 | StageId::D1 | StageId::R => 2,
            StageId::E3 | StageId::D3 => 4,
            StageId::B => 8,
        }
    }

    /// Spatial downsampling relative to the input image.
    pub fn scale(self) -> usize {
        match self {
            StageId::E1 | StageId::D1 | StageId::R => 1,
            StageId::E2 | StageId::D2 => 2,
            StageId::E3 | StageId::D3 => 4,
            StageId::B => 8,
        }
    }

    pub fn parse(s: &str) -> Result<StageId> {
        StageId::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| EnsError::config(format!("unknown stage {s:?}")))
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Options for one stage: the teacher plus surrogates, largest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub id: StageId,
    pub teacher_blocks: usize,
    pub surrogate_blocks: Vec<usize>,
}

impl StageSpec {
    pub fn options(&self) -> usize {
        1 + self.surrogate_blocks.len()
    }

    /// Block kind and count chosen by option `z` (0 = teacher).
    pub fn choice(&self, z: usize) -> (BlockKind, usize) {
        if z == 0 {
            (BlockKind::Teacher, self.teacher_blocks)
        } else {
            (BlockKind::Surrogate, self.surrogate_blocks[z - 1])
        }
    }

    fn validate(&self) -> Result<()> {
        if self.teacher_blocks == 0 {
            return Err(EnsError::config(format!("{}: teacher needs >= 1 block", self.id)));
        }
        for (k, &n) in self.surrogate_blocks.iter().enumerate() {
            let too_big = match k {
                0 => n > self.teacher_blocks,
                _ => n >= self.surrogate_blocks[k - 1],
            };
            if n == 0 || too_big {
                return Err(EnsError::config(format!(
                    "{}: surrogate block counts must be positive, strictly descending and <= the teacher's",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// The default search space: 34,560 codes and 22 surrogates.
pub fn default_stage_specs() -> Vec<StageSpec> {
    let table: [(StageId, usize, &[usize]); 8] = [
        (StageId::E1, 4, &[4, 2]),
        (StageId::E2, 6, &[6, 4, 2]),
        (StageId::E3, 6, &[6, 4, 2]),
        (StageId::B, 8, &[8, 6, 4, 2]),
        (StageId::D3, 6, &[6, 4, 2]),
        (StageId::D2, 6, &[6, 4, 2]),
        (StageId::D1, 4, &[4, 2]),
        (StageId::R, 4, &[4, 2]),
    ];
    table
        .into_iter()
        .map(|(id, t, s)| StageSpec {
            id,
            teacher_blocks: t,
            surrogate_blocks: s.to_vec(),
        })
        .collect()
}

/// Validates a full eight-stage specification list.
pub fn validate_specs(specs: &[StageSpec]) -> Result<()> {
    if specs.len() != 8 || specs.iter().zip(StageId::ALL).any(|(s, id)| s.id != id) {
        return Err(EnsError::config("stage specs must list E1, E2, E3, B, D3, D2, D1, R in order"));
    }
    specs.iter().try_for_each(StageSpec::validate)
}

/// One option index per stage; 0 picks the teacher.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchCode(pub Vec<usize>);

impl ArchCode {
    pub fn teacher(stages: usize) -> Self {
        ArchCode(vec![0; stages])
    }

    /// The code choosing the smallest surrogate everywhere.
    pub fn smallest(specs: &[StageSpec]) -> Self {
        ArchCode(specs.iter().map(|s| s.options() - 1).collect())
    }

    pub fn validate(&self, specs: &[StageSpec]) -> Result<()> {
        if self.0.len() != specs.len() {
            return Err(EnsError::config(format!(
                "code has {} components, expected {}",
                self.0.len(),
                specs.len()
            )));
        }
        for (i, (&z, spec)) in self.0.iter().zip(specs).enumerate() {
            if z >= spec.options() {
                return Err(EnsError::Code {
                    stage: i,
                    value: z,
                    max: spec.options() - 1,
                });
            }
        }
        Ok(())
    }

    pub fn total_blocks(&self, specs: &[StageSpec]) -> usize {
        self.0.iter().zip(specs).map(|(&z, s)| s.choice(z).1).sum()
    }
}

impl fmt::Display for ArchCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Number of codes spanned by the given per-stage option counts.
pub fn space_size(options: &[usize]) -> usize {
    options.iter().product()
}

/// Every code over the given option counts, lexicographic with the last
/// component varying fastest.
pub fn enumerate_codes(options: &[usize]) -> impl Iterator<Item = ArchCode> + '_ {
    let total = space_size(options);
    (0..total).map(move |mut i| {
        let mut z = vec![0; options.len()];
        for (k, &n) in options.iter().enumerate().rev() {
            z[k] = i % n;
            i /= n;
        }
        ArchCode(z)
    })
}

/// Options per stage for a spec list.
pub fn option_counts(specs: &[StageSpec]) -> Vec<usize> {
    specs.iter().map(StageSpec::options).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Base channel width of the first encoder level.
    pub width: usize,
    pub blocks: BlockConfig,
    pub stages: Vec<StageSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 16,
            blocks: BlockConfig::default(),
            stages: default_stage_specs(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(EnsError::config("width must be >= 1"));
        }
        self.blocks.validate()?;
        validate_specs(&self.stages)?;
        for id in StageId::ALL {
            if (self.width * id.width_factor()) % self.blocks.heads != 0 {
                return Err(EnsError::config(format!(
                    "{id} width {} not divisible by {} heads",
                    self.width * id.width_factor(),
                    self.blocks.heads
                )));
            }
        }
        Ok(())
    }

    pub fn stage_width(&self, id: StageId) -> usize {
        self.width * id.width_factor()
    }
}

/// Node ids produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub output: NodeId,
    /// `(input, output)` of every stage, in stage order.
    pub stages: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: StageId,
    pub kind: VariantKind,
    pub blocks: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub width: usize,
    pub stages: Vec<StageSummary>,
    pub total_params: usize,
}

impl NetworkSummary {
    pub fn block_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.blocks).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    kinds: Vec<Vec<BlockKind>>,
    params: ParamStore,
    stem: ParamId,
    stages: Vec<Stage>,
    down: Vec<ParamId>,
    up: Vec<ParamId>,
    fuse: Vec<ParamId>,
    output: ParamId,
}

impl Network {
    /// Fresh random network whose stage `i` holds blocks `kinds[i]`.
    pub fn with_kinds(config: &ModelConfig, kinds: Vec<Vec<BlockKind>>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if kinds.len() != 8 {
            return Err(EnsError::config("a network has exactly 8 stages"));
        }
        let c = config.width;
        let mut params = ParamStore::new();
        let mut glue = rng.fork(100);
        let stem = params.add_init("stem/w", Shape::new(c, 3, 3, 3), 27, &mut glue);
        let mut stages = Vec::with_capacity(8);
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for (i, id) in StageId::ALL.into_iter().enumerate() {
            let w = config.stage_width(id);
            match id {
                StageId::E2 | StageId::E3 | StageId::B => {
                    // pixel_unshuffle(2) of the previous width, then 1x1 to w
                    let cin = 4 * (w / 2);
                    down.push(params.add_init(format!("down{}/w", down.len()), Shape::new(w, cin, 1, 1), cin, &mut glue));
                }
                StageId::D3 | StageId::D2 | StageId::D1 => {
                    let prev = config.stage_width(StageId::ALL[i - 1]);
                    let skip = config.stage_width(StageId::ALL[6 - i]);
                    up.push(params.add_init(format!("up{}/w", up.len()), Shape::new(2 * prev, prev, 1, 1), prev, &mut glue));
                    let cin = prev / 2 + skip;
                    fuse.push(params.add_init(format!("fuse{}/w", fuse.len()), Shape::new(w, cin, 1, 1), cin, &mut glue));
                }
                _ => {}
            }
            let mut stage_rng = rng.fork(i as u64);
            stages.push(Stage::init(
                &mut params,
                &format!("stage{i}/"),
                &kinds[i],
                w,
                &config.blocks,
                &mut stage_rng,
            )?);
        }
        let out_c = config.stage_width(StageId::R);
        let output = params.add_init("output/w", Shape::new(3, out_c, 3, 3), 9 * out_c, &mut glue);
        Ok(Network {
            config: config.clone(),
            kinds,
            params,
            stem,
            stages,
            down,
            up,
            fuse,
            output,
        })
    }

    /// Fresh random network choosing the stage options in `code`.
    pub fn from_code(config: &ModelConfig, code: &ArchCode, rng: &mut Rng) -> Result<Self> {
        code.validate(&config.stages)?;
        let kinds = code
            .0
            .iter()
            .zip(&config.stages)
            .map(|(&z, spec)| {
                let (kind, n) = spec.choice(z);
                vec![kind; n]
            })
            .collect();
        Network::with_kinds(config, kinds, rng)
    }

    pub fn teacher(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Network::from_code(config, &ArchCode::teacher(8), rng)
    }

    /// Network whose stages are copies of the given variants, with the
    /// non-stage weights taken from `glue`.
    pub fn from_variants(config: &ModelConfig, glue: &ParamStore, variants: &[&StageVariant]) -> Result<Self> {
        if variants.len() != 8 {
            return Err(EnsError::config("a network has exactly 8 stages"));
        }
        let kinds = variants.iter().map(|v| v.kinds().to_vec()).collect();
        let mut net = Network::with_kinds(config, kinds, &mut Rng::new(0))?;
        net.params.load_prefixed("", glue)?;
        for (i, v) in variants.iter().enumerate() {
            let expect = config.stage_width(StageId::ALL[i]);
            if v.channels() != expect {
                return Err(EnsError::config(format!(
                    "{} variant has width {}, expected {expect}",
                    StageId::ALL[i],
                    v.channels()
                )));
            }
            net.params.load_prefixed(&format!("stage{i}/"), v.params())?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kinds(&self) -> &[Vec<BlockKind>] {
        &self.kinds
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The parameters outside every stage.
    pub fn glue_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (_, name, value) in self.params.iter() {
            if !name.starts_with("stage") {
                out.add(name, value.clone());
            }
        }
        out
    }

    /// Stage `i` as a standalone variant with copied parameters.
    pub fn stage_variant(&self, i: usize) -> Result<StageVariant> {
        let id = StageId::ALL[i];
        let params = self.params.extract_prefixed(&format!("stage{i}/"));
        StageVariant::from_params(self.kinds[i].clone(), self.config.stage_width(id), &self.config.blocks, &params)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<Trace> {
        let s = ctx.graph.shape(x);
        if s.c() != 3 || s.h() % 8 != 0 || s.w() % 8 != 0 {
            return Err(TensorError::Shape {
                op: "network",
                msg: format!("input {s} must have 3 channels and sides divisible by 8"),
            }
            .into());
        }
        let mut trace = Vec::with_capacity(8);
        let stem = ctx.p(self.stem);
        let mut h = ctx.graph.conv3x3(x, stem, None)?;
        let mut skips = Vec::new();
        for i in 0..8 {
            if (1..=3).contains(&i) {
                skips.push(h);
                let w = ctx.p(self.down[i - 1]);
                let u = ctx.graph.pixel_unshuffle(h, 2)?;
                h = ctx.graph.conv1x1(u, w, None)?;
            } else if (4..=6).contains(&i) {
                let w = ctx.p(self.up[i - 4]);
                let f = ctx.p(self.fuse[i - 4]);
                let u = ctx.graph.conv1x1(h, w, None)?;
                let u = ctx.graph.pixel_shuffle(u, 2)?;
                let skip = skips.pop().expect("three encoder skips");
                let cat = ctx.graph.concat_channels(u, skip)?;
                h = ctx.graph.conv1x1(cat, f, None)?;
            }
            let input = h;
            h = self.stages[i].forward(ctx, h)?;
            trace.push((input, h));
        }
        let out_w = ctx.p(self.output);
        let residual = ctx.graph.conv3x3(h, out_w, None)?;
        let output = ctx.graph.add(x, residual)?;
        Ok(Trace { output, stages: trace })
    }

    /// Gradient-free forward pass.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::inference(&mut g, &self.params);
        let xn = ctx.graph.constant(x.clone());
        let trace = self.forward(&mut ctx, xn)?;
        Ok(g.value(trace.output).clone())
    }

    pub fn describe(&self) -> NetworkSummary {
        let stages: Vec<StageSummary> = StageId::ALL
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let prefix = format!("stage{i}/");
                let params = self
                    .params
                    .iter()
                    .filter(|(_, n, _)| n.starts_with(&prefix))
                    .map(|(_, _, t)| t.numel())
                    .sum();
                let kinds = &self.kinds[i];
                let kind = if kinds.iter().all(|k| *k == BlockKind::Teacher) {
                    VariantKind::Teacher
                } else if kinds.iter().all(|k| *k == BlockKind::Surrogate) {
                    VariantKind::Surrogate
                } else {
                    VariantKind::Mixed
                };
                StageSummary {
                    stage: id,
                    kind,
                    blocks: kinds.len(),
                    params,
                }
            })
            .collect();
        NetworkSummary {
            width: self.config.width,
            stages,
            total_params: self.params.num_values(),
        }
    }
}
