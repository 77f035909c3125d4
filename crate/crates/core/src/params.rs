//! Named, ordered collections of parameter tensors.
//!
//! Every parameter-holding struct lists its tensors in one fixed order. The
//! same order is used to register leaves on a graph, to read gradients back
//! and to feed the optimizer, so the three can never drift apart.

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub trait ParamSet<T: Scalar> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor as a leaf, in order.
    fn bind_leaves(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the data.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
