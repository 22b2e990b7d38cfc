//! The tokenizer (encoder + FSQ) and decoder bundled with their
//! hyperparameters and checkpoint IO.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use ribosphere_tensor::nn::{self, init_linear};
use ribosphere_tensor::rng::stream;
use ribosphere_tensor::{Checkpoint, ParamStore, Tape, Var};

use crate::decoder::{self, DecoderConfig, NetworkField};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::flow::{self, SamplerConfig};
use crate::fsq::{self, FsqConfig, TokenSequence};
use crate::geometry::{self, Point};
use crate::structure::{mean_center, AtomSet, RnaStructure};

pub const FSQ_PROJ: &str = "fsq.proj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub atom_set: AtomSet,
    pub encoder: EncoderConfig,
    pub fsq_levels: Vec<u32>,
    pub decoder: DecoderConfig,
    /// Å per normalised coordinate unit, measured on the training corpus.
    pub coord_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            atom_set: AtomSet::A11,
            encoder: EncoderConfig::default(),
            fsq_levels: vec![7, 5, 5, 5, 5],
            decoder: DecoderConfig::default(),
            coord_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.fsq()?;
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return Err(Error::Config(format!("coord_scale must be positive, got {}", self.coord_scale)));
        }
        Ok(())
    }

    pub fn fsq(&self) -> Result<FsqConfig> {
        FsqConfig::new(self.fsq_levels.clone())
    }
}

/// Root-mean-square distance of observed atoms from their structure's
/// centroid, pooled over the corpus.
pub fn corpus_scale(corpus: &[RnaStructure]) -> Result<f64> {
    let (mut ss, mut n) = (0.0, 0usize);
    for s in corpus {
        let c = mean_center(s)?;
        for (_, p) in c.observed() {
            ss += geometry::dot(p, p);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("corpus has no observed atoms".into()));
    }
    let scale = (ss / n as f64).sqrt();
    if scale > 0.0 {
        Ok(scale)
    } else {
        Err(Error::Invalid("corpus coordinates are all coincident".into()))
    }
}

#[derive(Debug, Clone)]
pub struct RiboModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Latents and codes of one structure.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Row-major `L × d`.
    pub latents: Vec<f64>,
    pub tokens: TokenSequence,
}

impl RiboModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stream(seed, &[0x1417]);
        init_parameters(&mut params, &config, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn fsq(&self) -> FsqConfig {
        self.config.fsq().expect("validated on construction")
    }

    /// Records encoder → projection → bound → round on `tape`, returning
    /// `(latents [L,d], bounded [L,m], quantised [L,m])`.
    pub fn tokenize_on_tape(&self, tape: &mut Tape, s: &RnaStructure) -> Result<(Var, Var, Var)> {
        let c = encoder::encode(tape, &self.params, &self.config.encoder, self.config.coord_scale, s, self.config.atom_set)?;
        let z = nn::linear(tape, &self.params, FSQ_PROJ, c)?;
        let b = fsq::bound(tape, z, &self.fsq())?;
        let q = fsq::quantize(tape, b)?;
        Ok((c, b, q))
    }

    pub fn encode(&self, s: &RnaStructure) -> Result<Encoded> {
        let s = self.prepare(s)?;
        let mut tape = Tape::new();
        let (c, b, _) = self.tokenize_on_tape(&mut tape, &s)?;
        Ok(Encoded {
            latents: tape.value(c).to_vec(),
            tokens: TokenSequence::from_bounded(tape.value(b), &self.fsq())?,
        })
    }

    pub fn tokenize(&self, s: &RnaStructure) -> Result<TokenSequence> {
        Ok(self.encode(s)?.tokens)
    }

    /// Converts to the model's atom set when `s` carries a superset.
    pub fn prepare(&self, s: &RnaStructure) -> Result<RnaStructure> {
        s.to_atom_set(self.config.atom_set)
    }

    /// Samples coordinates for `tokens` (Å, zero-CoM) with the given sampler.
    /// `template` supplies id, sequence and chain for the output.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        tokens: &TokenSequence,
        template: &RnaStructure,
        sampler: &SamplerConfig,
        stochastic: bool,
        rng: &mut R,
        obs: &mut dyn flow::Observer,
    ) -> Result<RnaStructure> {
        let l = tokens.len();
        if template.len() != l {
            return Err(Error::LengthMismatch(template.len(), l));
        }
        let atoms = self.config.atom_set.len();
        let field = NetworkField {
            store: &self.params,
            cfg: &self.config.decoder,
            codes: &tokens.quantized,
            code_dim: self.fsq().dim(),
            residues: l,
            atoms,
            anchor_slot: self.config.atom_set.c4_index(),
            coord_scale: self.config.coord_scale,
        };
        let x = if stochastic {
            flow::sde_sample(&field, sampler, rng, obs)?
        } else {
            flow::euler_sample(&field, sampler, rng, obs)?
        };
        let coords: Vec<Point> = x.iter().map(|p| geometry::scale(*p, self.config.coord_scale)).collect();
        let mut out = RnaStructure::from_coords(template.id.clone(), template.sequence.clone(), self.config.atom_set, coords)?;
        out.chain_id = template.chain_id.clone();
        Ok(out)
    }

    /// Encode, quantise and sample back to coordinates.
    pub fn reconstruct<R: Rng + ?Sized>(&self, s: &RnaStructure, sampler: &SamplerConfig, rng: &mut R) -> Result<RnaStructure> {
        let s = self.prepare(s)?;
        let tokens = self.tokenize(&s)?;
        self.decode(&tokens, &s, sampler, false, rng, &mut ())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::to_string(&self.config)?);
        ck.add_store("model.", &self.params)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&ck.metadata)?;
        let model_meta = meta.get("model").cloned().unwrap_or(meta);
        let config: ModelConfig = serde_json::from_value(model_meta)?;
        config.validate()?;
        let mut params = ck.store("model.");
        params.set_trainable("", true);
        let mut expected = ParamStore::new();
        init_parameters(&mut expected, &config, &mut stream(0, &[]))?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Format(format!("checkpoint tensor {name} has shape {:?}, expected {:?}", p.shape(), t.shape())))
                }
                None => return Err(Error::Format(format!("checkpoint is missing tensor {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Encoder and quantiser parameters only.
    pub fn tokenizer_params(&self) -> ParamStore {
        let mut p = self.params.subset("encoder.");
        p.merge(self.params.subset("fsq."));
        p
    }
}

fn init_parameters<R: Rng + ?Sized>(params: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<()> {
    let fsq = config.fsq()?;
    encoder::init_encoder(params, &config.encoder, config.atom_set, rng);
    init_linear(params, FSQ_PROJ, config.encoder.hidden_dim, fsq.dim(), true, rng);
    decoder::init_decoder(params, &config.decoder, config.atom_set.len(), fsq.dim(), rng);
    Ok(())
}
