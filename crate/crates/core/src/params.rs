//! Named, grouped parameter storage shared by the encoders and heads.
//!
//! Every model parameter lives in one [`ParamSet`] entry with a unique name,
//! a group (which freeze/unfreeze toggles act on), and a weight-decay
//! exemption flag for biases and normalization parameters. Checkpoints
//! serialize entries in insertion order.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which freeze group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    TextEncoder,
    ImageEncoder,
    Heads,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TextEncoder => "text-encoder",
            ParamGroup::ImageEncoder => "image-encoder",
            ParamGroup::Heads => "heads",
        }
    }

    /// True for the feature-extractor groups that phase 1 freezes.
    pub fn is_encoder(self) -> bool {
        matches!(self, ParamGroup::TextEncoder | ParamGroup::ImageEncoder)
    }
}

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    pub decay_exempt: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        mut tensor: Tensor,
        group: ParamGroup,
        decay_exempt: bool,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        tensor.set_trainable(true);
        self.entries.push(Param {
            name,
            tensor,
            group,
            decay_exempt,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn scalar_count_in(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Mark every parameter in encoder groups trainable or not.
    pub fn set_encoders_trainable(&mut self, trainable: bool) {
        for p in &mut self.entries {
            if p.group.is_encoder() {
                p.tensor.set_trainable(trainable);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.tensor.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.entries {
            p.tensor.clear_grad();
        }
    }
}

/// Binds parameters onto a tape once per forward pass, memoizing vars so a
/// shared transformer block registers a single leaf no matter how many
/// layers reuse it (which is what makes its gradients accumulate across
/// layers).
pub struct ParamBinder {
    vars: Vec<Option<Var>>,
    bound: Vec<(ParamId, Var)>,
}

impl ParamBinder {
    pub fn new(params: &ParamSet) -> Self {
        ParamBinder {
            vars: vec![None; params.len()],
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, params: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf_tensor(&params.get(id).tensor);
        self.vars[id.0] = Some(v);
        self.bound.push((id, v));
        v
    }

    /// Pre-bind a parameter to an existing var. Gradient checks use this to
    /// probe one parameter through a tape leaf they control.
    pub fn override_binding(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
        self.bound.push((id, var));
    }

    /// Move gradients from the tape into trainable parameter tensors,
    /// scaled (for batch averaging). Call after `tape.backward`.
    pub fn accumulate_grads(
        &self,
        tape: &Tape,
        params: &mut ParamSet,
        scale: f32,
    ) -> Result<()> {
        for &(id, var) in &self.bound {
            if !params.tensor(id).is_trainable() {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                if g.len() != params.tensor(id).numel() {
                    return Err(Error::Contract(format!(
                        "gradient length {} does not match parameter {}",
                        g.len(),
                        params.get(id).name
                    )));
                }
                let scaled: Vec<f32> = g.iter().map(|x| x * scale).collect();
                params.tensor_mut(id).accumulate_grad(&scaled);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_and_counts() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[2, 3]), ParamGroup::TextEncoder, false);
        ps.add("b", Tensor::zeros(&[4]), ParamGroup::Heads, true);
        assert_eq!(ps.scalar_count(), 10);
        assert_eq!(ps.scalar_count_in(ParamGroup::TextEncoder), 6);
        assert_eq!(ps.scalar_count_in(ParamGroup::Heads), 4);
        assert!(ps.by_name("a").is_some());
        assert!(ps.by_name("zzz").is_none());
    }

    #[test]
    fn encoder_freeze_toggles_trainability() {
        let mut ps = ParamSet::new();
        let a = ps.add("enc", Tensor::zeros(&[2]), ParamGroup::ImageEncoder, false);
        let h = ps.add("head", Tensor::zeros(&[2]), ParamGroup::Heads, false);
        ps.set_encoders_trainable(false);
        assert!(!ps.tensor(a).is_trainable());
        assert!(ps.tensor(h).is_trainable());
        ps.set_encoders_trainable(true);
        assert!(ps.tensor(a).is_trainable());
    }

    #[test]
    fn binder_memoizes_and_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add(
            "w",
            Tensor::new(&[2], vec![1.0, 2.0]).unwrap(),
            ParamGroup::Heads,
            false,
        );
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&ps);
        let v1 = binder.bind(&mut tape, &ps, id);
        let v2 = binder.bind(&mut tape, &ps, id);
        assert_eq!(v1, v2);
        // loss = sum(w + w) -> dw = [2, 2]
        let doubled = tape.add(v1, v2).unwrap();
        let loss = tape.sum_all(doubled);
        tape.backward(loss).unwrap();
        binder.accumulate_grads(&tape, &mut ps, 1.0).unwrap();
        assert_eq!(ps.tensor(id).grad().unwrap(), &[2.0, 2.0]);
    }
}
