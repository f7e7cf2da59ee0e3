use autograd::{Element, Tape, Var, DEFAULT_LEAKY_SLOPE};

use super::config::{BranchState, EfficientBlockSpec};
use super::layers::{Conv, Norm, Param, ParamFactory};
use crate::error::{Error, Result};

/// Squeeze (1×1×1 to half width) → instance norm → LeakyReLU → expand (k1×k2×k3 back to full width).
#[derive(Debug, Clone)]
pub struct EfficientBlock<E> {
    pub squeeze: Conv<E>,
    pub norm: Norm<E>,
    pub expand: Conv<E>,
}

impl<E: Element> EfficientBlock<E> {
    pub fn new(f: &mut ParamFactory<'_>, name: &str, spec: &EfficientBlockSpec) -> Self {
        let (c, s) = (spec.channels, spec.squeeze_channels());
        Self {
            squeeze: Conv::new(f, &format!("{name}.squeeze"), c, s, [1, 1, 1], [1, 1, 1]),
            norm: Norm::new(f, &format!("{name}.norm"), s),
            expand: Conv::new(f, &format!("{name}.expand"), s, c, spec.kernel.0, [1, 1, 1]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let h = self.squeeze.forward(tape, x)?;
        let h = self.norm.forward(tape, h)?;
        let h = tape.leaky_relu(h, E::lit(DEFAULT_LEAKY_SLOPE));
        self.expand.forward(tape, h)
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut v = self.squeeze.params().to_vec();
        v.extend(self.norm.params());
        v.extend(self.expand.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut v: Vec<&mut Param<E>> = self.squeeze.params_mut().into_iter().collect();
        v.extend(self.norm.params_mut());
        v.extend(self.expand.params_mut());
        v
    }
}

/// One parallel branch of a PRM: an efficient block, its scalar weight, and
/// its lifecycle state. Pruned branches own nothing.
#[derive(Debug, Clone)]
pub struct Branch<E> {
    pub spec: EfficientBlockSpec,
    state: BranchState,
    block: Option<EfficientBlock<E>>,
    weight: Option<Param<E>>,
}

impl<E: Element> Branch<E> {
    pub fn new(f: &mut ParamFactory<'_>, name: &str, spec: EfficientBlockSpec, w_init: f64) -> Self {
        let block = EfficientBlock::new(f, name, &spec);
        let weight = f.constant(format!("{name}.w"), &[1], w_init);
        Self {
            spec,
            state: BranchState::Active,
            block: Some(block),
            weight: Some(weight),
        }
    }

    pub fn pruned(spec: EfficientBlockSpec) -> Self {
        Self {
            spec,
            state: BranchState::Pruned,
            block: None,
            weight: None,
        }
    }

    pub fn state(&self) -> BranchState {
        self.state
    }

    pub fn block(&self) -> Option<&EfficientBlock<E>> {
        self.block.as_ref()
    }

    pub fn block_mut(&mut self) -> Option<&mut EfficientBlock<E>> {
        self.block.as_mut()
    }

    pub fn weight(&self) -> Option<&Param<E>> {
        self.weight.as_ref()
    }

    pub fn weight_mut(&mut self) -> Option<&mut Param<E>> {
        self.weight.as_mut()
    }

    /// `EB(x)` regardless of whether the branch is active or masked.
    pub fn eb_forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        match &self.block {
            Some(b) => b.forward(tape, x),
            None => Err(Error::Lifecycle("forward through a pruned branch".into())),
        }
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut v = self.block.as_ref().map(|b| b.params()).unwrap_or_default();
        v.extend(self.weight.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut v = self.block.as_mut().map(|b| b.params_mut()).unwrap_or_default();
        v.extend(self.weight.as_mut());
        v
    }

    /// Parameters held by this branch, including its scalar weight.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub(crate) fn mask(&mut self) -> Result<()> {
        match self.state {
            BranchState::Active => {
                self.state = BranchState::Masked;
                Ok(())
            }
            s => Err(Error::Lifecycle(format!("cannot mask a {s:?} branch"))),
        }
    }

    pub(crate) fn restore(&mut self) -> Result<()> {
        match self.state {
            BranchState::Masked => {
                self.state = BranchState::Active;
                Ok(())
            }
            s => Err(Error::Lifecycle(format!("cannot restore a {s:?} branch"))),
        }
    }

    /// Frees the parameters of a masked branch; returns how many were removed.
    pub(crate) fn commit(&mut self) -> Result<usize> {
        match self.state {
            BranchState::Masked => {
                let removed = self.parameter_count();
                self.block = None;
                self.weight = None;
                self.state = BranchState::Pruned;
                Ok(removed)
            }
            s => Err(Error::Lifecycle(format!("cannot commit a {s:?} branch"))),
        }
    }
}

/// Parallel redundant module: `x + Σ_{active i} w_i · EB_i(x)`.
#[derive(Debug, Clone)]
pub struct Prm<E> {
    pub label: String,
    pub channels: usize,
    pub branches: Vec<Branch<E>>,
}

impl<E: Element> Prm<E> {
    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(autograd::TensorError::Shape(format!(
                "{}: input has {c} channels, module expects {}",
                self.label, self.channels
            ))
            .into());
        }
        let mut acc = x;
        for branch in self.branches.iter().filter(|b| b.state == BranchState::Active) {
            let eb = branch.eb_forward(tape, x)?;
            let w = branch.weight.as_ref().expect("active branch has a weight").on(tape);
            let term = tape.mul_scalar_var(eb, w)?;
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    }

    pub fn indices_in(&self, state: BranchState) -> Vec<usize> {
        self.branches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.state == state)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn states(&self) -> Vec<BranchState> {
        self.branches.iter().map(|b| b.state).collect()
    }
}
