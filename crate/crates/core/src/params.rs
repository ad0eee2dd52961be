//! Named parameter trees shared by the trainable modules.
//!
//! Every parameter struct is generic over its leaf type: `Tensor` for stored
//! weights, `Var<'t>` once bound to a tape, or `Option<Tensor>` for gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A structure whose leaves can be enumerated by dotted name in a fixed order.
pub trait ParamTree<T> {
    type Mapped<U>;

    /// Applies `f` to every leaf, preserving structure.
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Self::Mapped<U>;

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>);

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>);

    fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Records every tensor of `params` on `tape` as a trainable leaf.
pub fn bind<'t, P>(tape: &'t Tape, params: &P) -> P::Mapped<Var<'t>>
where
    P: ParamTree<Tensor>,
{
    params.map(&mut |t: &Tensor| tape.param(t.clone()))
}

/// Total number of scalar parameters.
pub fn count<P: ParamTree<Tensor>>(params: &P) -> usize {
    params.named().iter().map(|(_, t)| t.len()).sum()
}

/// Copies values from `(name, tensor)` pairs into `params`, requiring every
/// leaf to be present with a matching shape.
pub fn load_named<P: ParamTree<Tensor>>(params: &mut P, source: &[(String, Tensor)]) -> Result<()> {
    for (name, slot) in params.named_mut() {
        let (_, t) = source
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("load_named", slot.shape(), t.shape()));
        }
        *slot = t.clone();
    }
    Ok(())
}

impl<T> ParamTree<T> for Vec<T> {
    type Mapped<U> = Vec<U>;

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Vec<U> {
        self.iter().map(f).collect()
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.extend(self.iter().enumerate().map(|(i, t)| (join(prefix, &i.to_string()), t)));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.extend(self.iter_mut().enumerate().map(|(i, t)| (join(prefix, &i.to_string()), t)));
    }
}
