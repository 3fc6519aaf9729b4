use super::Tensor2;

/// Named parameter tensors in a fixed canonical order.
///
/// The visit order is also the order in which `bind` registers the tensors
/// on a tape, so gradient vectors line up with `visit_mut`.
pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor2));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, _| out.push(name));
        out
    }
}

/// Declares a parameter struct of `Tensor2` fields, a matching struct of
/// tape variables, and a `bind` that registers fields in declaration order.
macro_rules! param_block {
    (
        $(#[$meta:meta])*
        $name:ident => $vars:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $crate::numkernel::Tensor2,)+
        }

        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: $crate::numkernel::Var,)+
        }

        impl $name {
            pub fn bind<'p>(&'p self, tape: &mut $crate::numkernel::Tape<'p>) -> $vars {
                $vars { $($field: tape.param(&self.$field),)+ }
            }
        }

        impl $crate::numkernel::ParamSet for $name {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::numkernel::Tensor2),
            ) {
                $(f(format!("{}{}", prefix, stringify!($field)), &self.$field);)+
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &mut $crate::numkernel::Tensor2),
            ) {
                $(f(format!("{}{}", prefix, stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

pub(crate) use param_block;
