use ens_tensor::{Ctx, Graph, NodeId, ParamStore, Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::{BlockConfig, MambaBlock, RestormerBlock};
use crate::{EnsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Teacher,
    Surrogate,
}

#[derive(Clone, Debug)]
pub enum Block {
    Restormer(RestormerBlock),
    Mamba(MambaBlock),
}

impl Block {
    pub fn init(
        kind: BlockKind,
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cfg: &BlockConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Teacher => Block::Restormer(RestormerBlock::init(store, prefix, channels, cfg, rng)?),
            BlockKind::Surrogate => Block::Mamba(MambaBlock::init(store, prefix, channels, cfg, rng)?),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Restormer(_) => BlockKind::Teacher,
            Block::Mamba(_) => BlockKind::Surrogate,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
        match self {
            Block::Restormer(b) => b.forward(ctx, x),
            Block::Mamba(b) => b.forward(ctx, x),
        }
    }
}

/// A sequence of blocks at one width, registered under `{prefix}block{j}/`.
#[derive(Clone, Debug)]
pub struct Stage {
    blocks: Vec<Block>,
}

impl Stage {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        kinds: &[BlockKind],
        channels: usize,
        cfg: &BlockConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kinds.is_empty() {
            return Err(EnsError::config("a stage needs at least one block"));
        }
        let blocks = kinds
            .iter()
            .enumerate()
            .map(|(j, &kind)| {
                let mut block_rng = rng.fork(j as u64);
                Block::init(kind, store, &format!("{prefix}block{j}/"), channels, cfg, &mut block_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Stage { blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: NodeId) -> Result<NodeId> {
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Teacher,
    Surrogate,
    Mixed,
}

/// A stage that owns its parameters, with names `block{j}/...`.
#[derive(Clone, Debug)]
pub struct StageVariant {
    kinds: Vec<BlockKind>,
    channels: usize,
    stage: Stage,
    params: ParamStore,
}

impl StageVariant {
    pub fn new(kinds: Vec<BlockKind>, channels: usize, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let stage = Stage::init(&mut params, "", &kinds, channels, cfg, rng)?;
        Ok(StageVariant {
            kinds,
            channels,
            stage,
            params,
        })
    }

    pub fn teacher(blocks: usize, channels: usize, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        StageVariant::new(vec![BlockKind::Teacher; blocks], channels, cfg, rng)
    }

    pub fn surrogate(blocks: usize, channels: usize, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        StageVariant::new(vec![BlockKind::Surrogate; blocks], channels, cfg, rng)
    }

    /// Rebuilds a variant around previously saved parameters.
    pub fn from_params(kinds: Vec<BlockKind>, channels: usize, cfg: &BlockConfig, params: &ParamStore) -> Result<Self> {
        let mut v = StageVariant::new(kinds, channels, cfg, &mut Rng::new(0))?;
        if params.len() != v.params.len() {
            return Err(EnsError::config(format!(
                "stage expects {} tensors, got {}",
                v.params.len(),
                params.len()
            )));
        }
        v.params.load_prefixed("", params)?;
        Ok(v)
    }

    pub fn kind(&self) -> VariantKind {
        if self.kinds.iter().all(|k| *k == BlockKind::Teacher) {
            VariantKind::Teacher
        } else if self.kinds.iter().all(|k| *k == BlockKind::Surrogate) {
            VariantKind::Surrogate
        } else {
            VariantKind::Mixed
        }
    }

    pub fn kinds(&self) -> &[BlockKind] {
        &self.kinds
    }

    pub fn block_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stage(&self) -> &Stage {
        &self.stage
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Gradient-free forward pass.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut ctx = Ctx::inference(&mut g, &self.params);
        let xn = ctx.graph.constant(x.clone());
        let y = self.stage.forward(&mut ctx, xn)?;
        Ok(g.value(y).clone())
    }
}
