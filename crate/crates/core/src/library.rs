//! The pool of teacher stages and surrogate variants that codes select from.

use std::fs;
use std::path::Path;

use ens_tensor::{checkpoint, mix_seed, ParamStore, Rng};
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, StageVariant};
use crate::distill::DistillReport;
use crate::unet::{ArchCode, ModelConfig, Network, StageId};
use crate::{EnsError, Result};

#[derive(Clone, Debug)]
pub struct BlockLibrary {
    config: ModelConfig,
    seed: u64,
    glue: ParamStore,
    teachers: Vec<StageVariant>,
    surrogates: Vec<Vec<StageVariant>>,
    reports: Vec<Vec<Option<DistillReport>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryManifest {
    version: u32,
    model: ModelConfig,
    seed: u64,
    reports: Vec<Vec<Option<DistillReport>>>,
}

const MANIFEST_VERSION: u32 = 1;

pub fn surrogate_file_name(stage: StageId, variant: usize) -> String {
    format!("surrogate_{stage}_{variant}.bin")
}

impl BlockLibrary {
    /// Library around a trained teacher network. Surrogates start at their
    /// seeded initialization; see [`BlockLibrary::initial_surrogate`].
    pub fn from_teacher(teacher: &Network, seed: u64) -> Result<Self> {
        let config = teacher.config().clone();
        if teacher.kinds().iter().flatten().any(|k| *k != BlockKind::Teacher) {
            return Err(EnsError::config("library teacher must contain only teacher blocks"));
        }
        let teachers = (0..8).map(|i| teacher.stage_variant(i)).collect::<Result<Vec<_>>>()?;
        let mut surrogates = Vec::with_capacity(8);
        let mut reports = Vec::with_capacity(8);
        for (i, spec) in config.stages.iter().enumerate() {
            let row = (1..spec.options())
                .map(|z| BlockLibrary::initial_surrogate(&config, i, z, seed))
                .collect::<Result<Vec<_>>>()?;
            reports.push(vec![None; row.len()]);
            surrogates.push(row);
        }
        Ok(BlockLibrary {
            glue: teacher.glue_params(),
            config,
            seed,
            teachers,
            surrogates,
            reports,
        })
    }

    /// The untrained state of surrogate `variant` (1-based) of stage `stage`.
    pub fn initial_surrogate(config: &ModelConfig, stage: usize, variant: usize, seed: u64) -> Result<StageVariant> {
        let spec = &config.stages[stage];
        let (_, blocks) = spec.choice(variant);
        let mut rng = Rng::new(mix_seed(mix_seed(seed, 0x1417), (stage * 16 + variant) as u64));
        StageVariant::surrogate(blocks, config.stage_width(spec.id), &config.blocks, &mut rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn glue(&self) -> &ParamStore {
        &self.glue
    }

    pub fn teacher(&self, stage: usize) -> &StageVariant {
        &self.teachers[stage]
    }

    pub fn surrogates(&self, stage: usize) -> &[StageVariant] {
        &self.surrogates[stage]
    }

    pub fn report(&self, stage: usize, variant: usize) -> Option<&DistillReport> {
        self.reports[stage][variant - 1].as_ref()
    }

    pub fn surrogate_count(&self) -> usize {
        self.surrogates.iter().map(Vec::len).sum()
    }

    pub fn surrogates_per_stage(&self) -> Vec<usize> {
        self.surrogates.iter().map(Vec::len).collect()
    }

    /// Option `z` of stage `stage` (0 = teacher).
    pub fn variant(&self, stage: usize, z: usize) -> &StageVariant {
        match z {
            0 => &self.teachers[stage],
            _ => &self.surrogates[stage][z - 1],
        }
    }

    pub fn set_surrogate(
        &mut self,
        stage: usize,
        variant: usize,
        v: StageVariant,
        report: Option<DistillReport>,
    ) -> Result<()> {
        let slot = self
            .surrogates
            .get_mut(stage)
            .and_then(|row| row.get_mut(variant.wrapping_sub(1)))
            .ok_or_else(|| EnsError::config(format!("no surrogate slot {stage}/{variant}")))?;
        if slot.kinds() != v.kinds() || slot.channels() != v.channels() {
            return Err(EnsError::config(format!("surrogate {stage}/{variant} has the wrong structure")));
        }
        *slot = v;
        self.reports[stage][variant - 1] = report;
        Ok(())
    }

    /// Network realizing `code` from the library's variants.
    pub fn assemble(&self, code: &ArchCode) -> Result<Network> {
        code.validate(&self.config.stages)?;
        let variants: Vec<&StageVariant> = code.0.iter().enumerate().map(|(i, &z)| self.variant(i, z)).collect();
        Network::from_variants(&self.config, &self.glue, &variants)
    }

    /// Half teacher, half surrogate: the first `ceil(n/2)` teacher blocks,
    /// followed by the first `floor(n/2)` blocks of the smallest surrogate that
    /// has at least that many.
    pub fn equal_split_variant(&self, stage: usize) -> Result<StageVariant> {
        let teacher = &self.teachers[stage];
        let n = teacher.block_count();
        let keep = n.div_ceil(2);
        let swap = n / 2;
        let mut kinds = vec![BlockKind::Teacher; keep];
        kinds.extend(vec![BlockKind::Surrogate; swap]);
        let mut out = StageVariant::new(kinds, teacher.channels(), &self.config.blocks, &mut Rng::new(0))?;
        for j in 0..keep {
            let src = teacher.params().extract_prefixed(&format!("block{j}/"));
            out.params_mut().load_prefixed(&format!("block{j}/"), &src)?;
        }
        if swap > 0 {
            let donor = self.surrogates[stage]
                .iter()
                .rev()
                .find(|v| v.block_count() >= swap)
                .ok_or_else(|| EnsError::config(format!("stage {stage} has no surrogate with {swap} blocks")))?;
            for j in 0..swap {
                let src = donor.params().extract_prefixed(&format!("block{j}/"));
                out.params_mut().load_prefixed(&format!("block{}/", keep + j), &src)?;
            }
        }
        Ok(out)
    }

    pub fn equal_split_network(&self) -> Result<Network> {
        let variants = (0..8).map(|i| self.equal_split_variant(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&StageVariant> = variants.iter().collect();
        Network::from_variants(&self.config, &self.glue, &refs)
    }

    /// Writes `library.json`, `teacher.bin` and one file per surrogate.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let teacher = self.assemble(&ArchCode::teacher(8))?;
        checkpoint::save(teacher.params(), dir.join("teacher.bin"))?;
        for (i, row) in self.surrogates.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                checkpoint::save(v.params(), dir.join(surrogate_file_name(StageId::ALL[i], k + 1)))?;
            }
        }
        let manifest = LibraryManifest {
            version: MANIFEST_VERSION,
            model: self.config.clone(),
            seed: self.seed,
            reports: self.reports.clone(),
        };
        fs::write(dir.join("library.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: LibraryManifest = serde_json::from_str(&fs::read_to_string(dir.join("library.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(EnsError::config(format!("unsupported library version {}", manifest.version)));
        }
        let teacher = load_teacher(&manifest.model, &dir.join("teacher.bin"))?;
        let mut lib = BlockLibrary::from_teacher(&teacher, manifest.seed)?;
        for i in 0..8 {
            for k in 0..lib.surrogates[i].len() {
                let params = checkpoint::load(dir.join(surrogate_file_name(StageId::ALL[i], k + 1)))?;
                let kinds = lib.surrogates[i][k].kinds().to_vec();
                let width = lib.surrogates[i][k].channels();
                let v = StageVariant::from_params(kinds, width, &manifest.model.blocks, &params)?;
                lib.set_surrogate(i, k + 1, v, manifest.reports[i][k].clone())?;
            }
        }
        Ok(lib)
    }
}

/// Reads a teacher network checkpoint written by [`checkpoint::save`].
pub fn load_teacher(config: &ModelConfig, path: &Path) -> Result<Network> {
    let params = checkpoint::load(path)?;
    let mut net = Network::teacher(config, &mut Rng::new(0))?;
    if params.len() != net.params().len() {
        return Err(EnsError::config(format!(
            "{} holds {} tensors, teacher expects {}",
            path.display(),
            params.len(),
            net.params().len()
        )));
    }
    net.params_mut().load_prefixed("", &params)?;
    Ok(net)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkManifest {
    version: u32,
    model: ModelConfig,
    kinds: Vec<Vec<BlockKind>>,
}

/// Writes `model.bin` (parameters) and `model.json` (configuration and
/// per-stage block kinds) into `dir`.
pub fn save_network(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint::save(net.params(), dir.join("model.bin"))?;
    let manifest = NetworkManifest {
        version: MANIFEST_VERSION,
        model: net.config().clone(),
        kinds: net.kinds().to_vec(),
    };
    fs::write(dir.join("model.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a network written by [`save_network`].
pub fn load_network(dir: &Path) -> Result<Network> {
    let manifest: NetworkManifest = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(EnsError::config(format!("unsupported network version {}", manifest.version)));
    }
    let params = checkpoint::load(dir.join("model.bin"))?;
    let mut net = Network::with_kinds(&manifest.model, manifest.kinds, &mut Rng::new(0))?;
    if params.len() != net.params().len() {
        return Err(EnsError::config(format!(
            "{} holds {} tensors, the network expects {}",
            dir.display(),
            params.len(),
            net.params().len()
        )));
    }
    net.params_mut().load_prefixed("", &params)?;
    Ok(net)
}
