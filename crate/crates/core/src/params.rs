//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type: `Tensor<T>` for stored
//! weights, [`Var`] once bound to a graph, `Option<Tensor<T>>` for gradients.
//! Leaves are named by their dotted field path (`blocks.1.attn.wq`), which is
//! also the key used in checkpoints.

use crate::autograd::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub trait ParamTree<L> {
    type With<U>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &L) -> U) -> Self::With<U>;
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &L));
    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut L));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`ParamTree`] for a struct of tensor leaves and nested groups.
macro_rules! param_tree {
    ($ty:ident { $($leaf:ident),* $(,)? } $(groups { $($group:ident),* $(,)? })?) => {
        impl<L> $crate::params::ParamTree<L> for $ty<L> {
            type With<U> = $ty<U>;

            fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &L) -> U) -> $ty<U> {
                $ty {
                    $($leaf: f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf),)*
                    $($($group: self.$group.map_named(&$crate::params::join(prefix, stringify!($group)), f),)*)?
                }
            }

            fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &L)) {
                $(f(&$crate::params::join(prefix, stringify!($leaf)), &self.$leaf);)*
                $($(self.$group.visit_named(&$crate::params::join(prefix, stringify!($group)), f);)*)?
            }

            fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut L)) {
                $(f(&$crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $($(self.$group.visit_named_mut(&$crate::params::join(prefix, stringify!($group)), f);)*)?
            }
        }
    };
}
pub(crate) use param_tree;

impl<L, P: ParamTree<L>> ParamTree<L> for Option<P> {
    type With<U> = Option<P::With<U>>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &L) -> U) -> Self::With<U> {
        self.as_ref().map(|p| p.map_named(prefix, f))
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &L)) {
        if let Some(p) = self {
            p.visit_named(prefix, f);
        }
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut L)) {
        if let Some(p) = self {
            p.visit_named_mut(prefix, f);
        }
    }
}

impl<L, P: ParamTree<L>> ParamTree<L> for Vec<P> {
    type With<U> = Vec<P::With<U>>;

    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &L) -> U) -> Self::With<U> {
        self.iter()
            .enumerate()
            .map(|(i, p)| p.map_named(&join(prefix, &i.to_string()), f))
            .collect()
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &L)) {
        for (i, p) in self.iter().enumerate() {
            p.visit_named(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut L)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_named_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Places every tensor of `params` on `g`, as trainable leaves or constants.
pub fn bind<T: Element, P: ParamTree<Tensor<T>>>(
    params: &P,
    g: &mut Graph<T>,
    trainable: bool,
) -> P::With<Var> {
    params.map_named("", &mut |_, t| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    })
}

/// Gradients of bound parameters after [`Graph::backward`].
pub fn grads<T: Element, P: ParamTree<Var>>(bound: &P, g: &Graph<T>) -> P::With<Option<Tensor<T>>> {
    bound.map_named("", &mut |_, v| g.grad(*v).cloned())
}

/// `(name, tensor)` pairs in tree order.
pub fn named<L: Clone, P: ParamTree<L>>(params: &P) -> Vec<(String, L)> {
    let mut out = Vec::new();
    params.visit_named("", &mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

pub fn count<T: Element, P: ParamTree<Tensor<T>>>(params: &P) -> usize {
    let mut n = 0;
    params.visit_named("", &mut |_, t| n += t.len());
    n
}

pub(crate) fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(std * rng.normal())).collect(),
    )
    .expect("sized")
}

pub(crate) fn uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(rng.range(-bound, bound))).collect(),
    )
    .expect("sized")
}

/// Normal init scaled by `1/sqrt(fan_in)` for a `[fan_in, fan_out]` weight.
pub(crate) fn dense<T: Element>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}
