//! Named parameter containers and their registration on a tape.

use std::collections::HashMap;

use crate::numeric::{Gradients, Scalar, Tape, Tensor, Var};

/// A tree of named `f32` parameter tensors.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// Overwrites every parameter from `source`, failing on a missing name or shape change.
    fn load_named(&mut self, source: &HashMap<String, Tensor>) -> crate::Result<()> {
        let mut problem = None;
        self.visit_mut("", &mut |name, t| {
            if problem.is_some() {
                return;
            }
            match source.get(&name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    problem = Some(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    ))
                }
                None => problem = Some(format!("missing parameter `{name}`")),
            }
        });
        match problem {
            Some(p) => Err(crate::Error::Data(p)),
            None => Ok(()),
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P: Params> Params for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Parameter groups that can be placed on a tape as a matching tree of variables.
pub trait Bind {
    type Vars: Clone;
    fn bind<T: Scalar>(&self, binder: &mut Binder, tape: &mut Tape<T>, prefix: &str) -> Self::Vars;
}

impl<P: Bind> Bind for Vec<P> {
    type Vars = Vec<P::Vars>;

    fn bind<T: Scalar>(&self, binder: &mut Binder, tape: &mut Tape<T>, prefix: &str) -> Self::Vars {
        self.iter()
            .enumerate()
            .map(|(i, p)| p.bind(binder, tape, &join(prefix, &i.to_string())))
            .collect()
    }
}

/// Registers parameters on a tape and remembers which variable each name became.
#[derive(Debug, Default)]
pub struct Binder {
    trainable: bool,
    entries: Vec<(String, Var)>,
}

impl Binder {
    pub fn trainable() -> Self {
        Self {
            trainable: true,
            entries: Vec::new(),
        }
    }

    /// Parameters bound as constants: usable in a graph, never differentiated.
    pub fn frozen() -> Self {
        Self {
            trainable: false,
            entries: Vec::new(),
        }
    }

    pub fn bind<T: Scalar>(&mut self, tape: &mut Tape<T>, name: String, value: &Tensor) -> Var {
        let v = if self.trainable {
            tape.param(value)
        } else {
            tape.constant(value.cast())
        };
        if self.trainable {
            self.entries.push((name, v));
        }
        v
    }

    /// Gradients of the bound parameters, keyed by name, cast to `f32`.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(name, v)| (name.clone(), grads.get(*v).cast()))
            .collect()
    }
}

/// Declares a parameter struct, its tape-variable twin, and the glue between them.
macro_rules! param_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident => $vars:ident { $($field:ident),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::numeric::Tensor,)*
        }

        #[derive(Debug, Clone, Copy)]
        #[allow(dead_code)]
        pub struct $vars {
            $(pub $field: $crate::numeric::Var,)*
        }

        impl $crate::params::Params for $name {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::numeric::Tensor)) {
                $(f($crate::params::join(prefix, stringify!($field)), &self.$field);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::numeric::Tensor)) {
                $(f($crate::params::join(prefix, stringify!($field)), &mut self.$field);)*
            }
        }

        impl $crate::params::Bind for $name {
            type Vars = $vars;

            fn bind<T: $crate::numeric::Scalar>(
                &self,
                binder: &mut $crate::params::Binder,
                tape: &mut $crate::numeric::Tape<T>,
                prefix: &str,
            ) -> $vars {
                $vars {
                    $($field: binder.bind(tape, $crate::params::join(prefix, stringify!($field)), &self.$field),)*
                }
            }
        }
    };
}

/// Like `param_struct!`, but every field is itself a parameter group.
macro_rules! param_tree {
    (
        $(#[$meta:meta])*
        pub struct $name:ident => $vars:ident { $($field:ident : $ty:ty),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: $ty,)*
        }

        #[derive(Debug, Clone)]
        #[allow(dead_code)]
        pub struct $vars {
            $(pub $field: <$ty as $crate::params::Bind>::Vars,)*
        }

        impl $crate::params::Params for $name {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &$crate::numeric::Tensor)) {
                $($crate::params::Params::visit(&self.$field, &$crate::params::join(prefix, stringify!($field)), f);)*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::numeric::Tensor)) {
                $($crate::params::Params::visit_mut(&mut self.$field, &$crate::params::join(prefix, stringify!($field)), f);)*
            }
        }

        impl $crate::params::Bind for $name {
            type Vars = $vars;

            fn bind<T: $crate::numeric::Scalar>(
                &self,
                binder: &mut $crate::params::Binder,
                tape: &mut $crate::numeric::Tape<T>,
                prefix: &str,
            ) -> $vars {
                $vars {
                    $($field: $crate::params::Bind::bind(&self.$field, binder, tape, &$crate::params::join(prefix, stringify!($field))),)*
                }
            }
        }
    };
}

pub(crate) use {param_struct, param_tree};
