use autograd::{Element, Tape, TensorError, Var};
use serde::{Deserialize, Serialize};

use super::block::{Branch, Prm};
use super::config::{ArchitectureDescriptor, BranchState, EfficientBlockSpec, ModelConfig};
use super::layers::{Conv, ConvNormAct, Param, ParamFactory, UpConv};
use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};

/// Address of one branch: PRM index in forward order, branch index in kernel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BranchRef {
    pub prm: usize,
    pub branch: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderStage<E> {
    pub entry: ConvNormAct<E>,
    pub prm: Prm<E>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage<E> {
    pub up: UpConv<E>,
    pub fuse: ConvNormAct<E>,
    pub prm: Prm<E>,
    pub head: Conv<E>,
}

/// Everything a forward pass exposes to the losses and the pruner.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Segmentation logits per decoder level, finest first.
    pub logits: Vec<Var>,
    /// Pre-head decoder feature maps, finest first, aligned with `logits`.
    pub features: Vec<Var>,
    /// Bottleneck input feature map.
    pub encoding: Var,
    /// `(input, output)` of every PRM in forward order.
    pub prm_io: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Parameters that take part in a forward pass.
    pub effective: usize,
    /// Parameters parked in masked branches.
    pub masked: usize,
    pub total: usize,
}

/// U-shaped encoder–decoder whose every stage ends in a PRM.
///
/// Encoder stage 0 enters at full resolution with a stride-1 conv; later
/// encoder stages and the bottleneck enter with a stride-2 conv. Decoder
/// stage `j` upsamples, concatenates the encoder-`j` skip, fuses with a
/// 1×1×1 conv, runs its PRM and emits logits through a 1×1×1 head.
#[derive(Debug, Clone)]
pub struct Network<E> {
    config: ModelConfig,
    encoders: Vec<EncoderStage<E>>,
    bottleneck: EncoderStage<E>,
    /// Coarsest first, i.e. forward order; `decoders[k]` serves level `depth − 2 − k`.
    decoders: Vec<DecoderStage<E>>,
}

impl<E: Element> Network<E> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::build_with_states(config, seed, None)
    }

    /// Builds a fresh network whose PRMs keep only the branches the descriptor
    /// lists as active; masked and pruned branches are left out entirely.
    pub fn compact_from_descriptor(desc: &ArchitectureDescriptor, seed: u64) -> Result<Self> {
        desc.validate()?;
        let states: Vec<Vec<BranchState>> = desc
            .branch_states
            .iter()
            .map(|row| {
                row.iter()
                    .map(|s| match s {
                        BranchState::Active => BranchState::Active,
                        _ => BranchState::Pruned,
                    })
                    .collect()
            })
            .collect();
        Self::build_with_states(&desc.model_config(), seed, Some(&states))
    }

    /// Builds the exact topology a descriptor describes, including masked branches.
    pub fn from_descriptor(desc: &ArchitectureDescriptor, seed: u64) -> Result<Self> {
        desc.validate()?;
        Self::build_with_states(&desc.model_config(), seed, Some(&desc.branch_states))
    }

    fn build_with_states(config: &ModelConfig, seed: u64, states: Option<&[Vec<BranchState>]>) -> Result<Self> {
        config.validate()?;
        let d = config.depth;
        let ch = &config.channels;
        let mut rng = Stream::new(seed, purpose::INIT);
        let mut next_id = 0usize;
        let mut f = ParamFactory::new(&mut next_id, &mut rng);
        let mut prm_index = 0usize;

        let mut make_prm = |f: &mut ParamFactory<'_>, label: String, channels: usize| -> Result<Prm<E>> {
            let row = states.map(|s| &s[prm_index]);
            prm_index += 1;
            let live = row.map_or(config.kernels.len(), |r| {
                r.iter().filter(|s| **s != BranchState::Pruned).count()
            });
            if live == 0 {
                return Err(Error::Config(format!("{label} has no surviving branch")));
            }
            let w_init = 1.0 / live as f64;
            let mut branches = Vec::with_capacity(config.kernels.len());
            for (i, &k) in config.kernels.iter().enumerate() {
                let spec = EfficientBlockSpec::new(k, channels);
                let state = row.map_or(BranchState::Active, |r| r[i]);
                let mut b = match state {
                    BranchState::Pruned => Branch::pruned(spec),
                    _ => Branch::new(f, &format!("{label}.prm.b{i}"), spec, w_init),
                };
                if state == BranchState::Masked {
                    b.mask()?;
                }
                branches.push(b);
            }
            Ok(Prm {
                label,
                channels,
                branches,
            })
        };

        let mut encoders = Vec::with_capacity(d - 1);
        for i in 0..d - 1 {
            let label = format!("enc_{i}");
            let (cin, stride) = if i == 0 {
                (config.in_channels, [1, 1, 1])
            } else {
                (ch[i - 1], [2, 2, 2])
            };
            let entry = ConvNormAct::new(&mut f, &format!("{label}.entry"), cin, ch[i], [3, 3, 3], stride);
            let prm = make_prm(&mut f, label, ch[i])?;
            encoders.push(EncoderStage { entry, prm });
        }
        let entry = ConvNormAct::new(&mut f, "bn.entry", ch[d - 2], ch[d - 1], [3, 3, 3], [2, 2, 2]);
        let prm = make_prm(&mut f, "bn".into(), ch[d - 1])?;
        let bottleneck = EncoderStage { entry, prm };

        let mut decoders = Vec::with_capacity(d - 1);
        for j in (0..d - 1).rev() {
            let label = format!("dec_{j}");
            let up = UpConv::new(&mut f, &format!("{label}.up"), ch[j + 1], ch[j]);
            let fuse = ConvNormAct::new(&mut f, &format!("{label}.fuse"), 2 * ch[j], ch[j], [1, 1, 1], [1, 1, 1]);
            let prm = make_prm(&mut f, label.clone(), ch[j])?;
            let head = Conv::new(
                &mut f,
                &format!("{label}.head"),
                ch[j],
                config.num_classes,
                [1, 1, 1],
                [1, 1, 1],
            );
            decoders.push(DecoderStage { up, fuse, prm, head });
        }

        Ok(Self {
            config: config.clone(),
            encoders,
            bottleneck,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn num_prms(&self) -> usize {
        self.encoders.len() + 1 + self.decoders.len()
    }

    pub fn prm(&self, i: usize) -> &Prm<E> {
        let ne = self.encoders.len();
        if i < ne {
            &self.encoders[i].prm
        } else if i == ne {
            &self.bottleneck.prm
        } else {
            &self.decoders[i - ne - 1].prm
        }
    }

    pub fn prm_mut(&mut self, i: usize) -> &mut Prm<E> {
        let ne = self.encoders.len();
        if i < ne {
            &mut self.encoders[i].prm
        } else if i == ne {
            &mut self.bottleneck.prm
        } else {
            &mut self.decoders[i - ne - 1].prm
        }
    }

    pub fn prms(&self) -> impl Iterator<Item = &Prm<E>> {
        (0..self.num_prms()).map(move |i| self.prm(i))
    }

    pub fn prm_labels(&self) -> Vec<String> {
        self.prms().map(|p| p.label.clone()).collect()
    }

    pub fn branch(&self, r: BranchRef) -> Result<&Branch<E>> {
        if r.prm >= self.num_prms() || r.branch >= self.prm(r.prm).branches.len() {
            return Err(Error::Lifecycle(format!("no branch at {r:?}")));
        }
        Ok(&self.prm(r.prm).branches[r.branch])
    }

    fn check_input(&self, tape: &Tape<E>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 5 {
            return Err(TensorError::Shape(format!("network input must be N×C×D×H×W, got {s:?}")).into());
        }
        if s[1] != self.config.in_channels {
            return Err(TensorError::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, s[1]
            ))
            .into());
        }
        let div = self.config.spatial_divisor();
        for &e in &s[2..] {
            if e == 0 || e % div != 0 {
                let valid = e.div_ceil(div).max(1) * div;
                return Err(TensorError::Shape(format!(
                    "spatial extent {e} is not a multiple of {div} (depth {}); smallest valid extent ≥ {e} is {valid}",
                    self.config.depth
                ))
                .into());
            }
        }
        Ok(())
    }

    fn encoder_path(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        skips: &mut Vec<Var>,
        prm_io: &mut Vec<(Var, Var)>,
    ) -> Result<Var> {
        let mut h = x;
        for stage in &self.encoders {
            let a = stage.entry.forward(tape, h)?;
            h = stage.prm.forward(tape, a)?;
            prm_io.push((a, h));
            skips.push(h);
        }
        self.bottleneck.entry.forward(tape, h)
    }

    /// Encoder output (the bottleneck input) without running the decoder.
    pub fn encode(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        self.encoder_path(tape, x, &mut Vec::new(), &mut Vec::new())
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<ForwardOutputs> {
        self.check_input(tape, x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut prm_io = Vec::with_capacity(self.num_prms());
        let encoding = self.encoder_path(tape, x, &mut skips, &mut prm_io)?;
        let mut h = self.bottleneck.prm.forward(tape, encoding)?;
        prm_io.push((encoding, h));

        let mut logits = Vec::with_capacity(self.decoders.len());
        let mut features = Vec::with_capacity(self.decoders.len());
        for stage in &self.decoders {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = stage.up.forward(tape, h)?;
            let cat = tape.concat_channels(up, skip)?;
            let fused = stage.fuse.forward(tape, cat)?;
            h = stage.prm.forward(tape, fused)?;
            prm_io.push((fused, h));
            features.push(h);
            logits.push(stage.head.forward(tape, h)?);
        }
        logits.reverse();
        features.reverse();
        Ok(ForwardOutputs {
            logits,
            features,
            encoding,
            prm_io,
        })
    }

    /// All live parameters in construction order.
    pub fn params(&self) -> Vec<&Param<E>> {
        let mut v = Vec::new();
        for s in &self.encoders {
            v.extend(s.entry.params());
            for b in &s.prm.branches {
                v.extend(b.params());
            }
        }
        v.extend(self.bottleneck.entry.params());
        for b in &self.bottleneck.prm.branches {
            v.extend(b.params());
        }
        for s in &self.decoders {
            v.extend(s.up.params());
            v.extend(s.fuse.params());
            for b in &s.prm.branches {
                v.extend(b.params());
            }
            v.extend(s.head.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut v = Vec::new();
        for s in &mut self.encoders {
            v.extend(s.entry.params_mut());
            for b in &mut s.prm.branches {
                v.extend(b.params_mut());
            }
        }
        v.extend(self.bottleneck.entry.params_mut());
        for b in &mut self.bottleneck.prm.branches {
            v.extend(b.params_mut());
        }
        for s in &mut self.decoders {
            v.extend(s.up.params_mut());
            v.extend(s.fuse.params_mut());
            for b in &mut s.prm.branches {
                v.extend(b.params_mut());
            }
            v.extend(s.head.params_mut());
        }
        v
    }

    /// Parameters of everything outside the PRM branches.
    pub fn encoder_param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for s in &self.encoders {
            v.extend(s.entry.params().iter().map(|p| p.name.clone()));
            for b in &s.prm.branches {
                v.extend(b.params().iter().map(|p| p.name.clone()));
            }
        }
        v.extend(self.bottleneck.entry.params().iter().map(|p| p.name.clone()));
        v
    }

    pub fn param_count(&self) -> ParamCount {
        let total: usize = self.params().iter().map(|p| p.numel()).sum();
        let masked: usize = self
            .prms()
            .flat_map(|p| p.branches.iter())
            .filter(|b| b.state() == BranchState::Masked)
            .map(|b| b.parameter_count())
            .sum();
        ParamCount {
            effective: total - masked,
            masked,
            total,
        }
    }

    pub fn active_branch_count(&self) -> usize {
        self.prms()
            .flat_map(|p| p.branches.iter())
            .filter(|b| b.state() == BranchState::Active)
            .count()
    }

    pub fn branch_states(&self) -> Vec<Vec<BranchState>> {
        self.prms().map(|p| p.states()).collect()
    }

    pub fn descriptor(&self) -> ArchitectureDescriptor {
        ArchitectureDescriptor {
            depth: self.config.depth,
            channels: self.config.channels.clone(),
            kernels: self.config.kernels.clone(),
            num_classes: self.config.num_classes,
            in_channels: self.config.in_channels,
            branch_states: self.branch_states(),
        }
    }

    fn check_targets(&self, targets: &[BranchRef], want: BranchState, verb: &str) -> Result<()> {
        for &r in targets {
            let s = self.branch(r)?.state();
            if s != want {
                return Err(Error::Lifecycle(format!(
                    "cannot {verb} {} branch {}: it is {s:?}",
                    self.prm(r.prm).label,
                    r.branch
                )));
            }
        }
        Ok(())
    }

    /// Flips every target from active to masked. Parameters are untouched.
    pub fn apply_mask(&mut self, targets: &[BranchRef]) -> Result<()> {
        self.check_targets(targets, BranchState::Active, "mask")?;
        for &r in targets {
            self.prm_mut(r.prm).branches[r.branch].mask()?;
        }
        Ok(())
    }

    pub fn restore_mask(&mut self, targets: &[BranchRef]) -> Result<()> {
        self.check_targets(targets, BranchState::Masked, "restore")?;
        for &r in targets {
            self.prm_mut(r.prm).branches[r.branch].restore()?;
        }
        Ok(())
    }

    /// Permanently removes masked branches; returns the number of freed parameters.
    pub fn commit_prune(&mut self, targets: &[BranchRef]) -> Result<usize> {
        self.check_targets(targets, BranchState::Masked, "commit")?;
        let mut removed = 0;
        for &r in targets {
            removed += self.prm_mut(r.prm).branches[r.branch].commit()?;
        }
        Ok(removed)
    }
}
