//! Plain-text checkpoint format for [`FeatureMap`].
//!
//! ```text
//! featuremap 1
//! dims 3 16 1
//! layer relu
//! w <out*in values, row-major>
//! b <out values>
//! layer identity
//! ...
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::neural::{Activation, FeatureMap, Layer};
use crate::textio::{push_floats, Tokens};

impl FeatureMap {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.write_text(&mut out);
        out
    }

    pub(crate) fn write_text(&self, out: &mut String) {
        out.push_str("featuremap 1\ndims");
        for d in self.layer_dims() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for l in self.layers() {
            let _ = writeln!(out, "layer {}", l.activation.name());
            push_floats(out, "w", l.weight.as_slice());
            push_floats(out, "b", &l.bias);
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tok = Tokens::new(text);
        let fm = Self::read_tokens(&mut tok)?;
        tok.finish()?;
        Ok(fm)
    }

    pub(crate) fn read_tokens(tok: &mut Tokens<'_>) -> Result<Self> {
        tok.expect("featuremap")?;
        let version: u32 = tok.parse()?;
        if version != 1 {
            return Err(Error::Parse(format!(
                "unsupported featuremap version {version}"
            )));
        }
        tok.expect("dims")?;
        // dims are terminated by the first `layer` keyword
        let mut dims = Vec::new();
        loop {
            let t = tok.next_token()?;
            if t == "layer" {
                break;
            }
            dims.push(
                t.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad dimension `{t}`")))?,
            );
        }
        if dims.len() < 2 {
            return Err(Error::Parse("featuremap needs at least two dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            if i > 0 {
                tok.expect("layer")?;
            }
            let activation = Activation::parse(tok.next_token()?)?;
            tok.expect("w")?;
            let weight = Mat::from_vec(w[1], w[0], tok.floats(w[0] * w[1])?)?;
            tok.expect("b")?;
            let bias = tok.floats(w[1])?;
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        FeatureMap::new(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RngStream;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_roundtrip_is_exact(seed in any::<u64>(), hidden in 1usize..6, scale in -1e6f64..1e6) {
            let mut fm = FeatureMap::relu_mlp(&[2, hidden, 3], Activation::Tanh, &mut RngStream::new(seed, 0)).unwrap();
            let p: Vec<f64> = fm.params().iter().map(|v| v * scale).collect();
            fm.set_params(&p).unwrap();
            let back = FeatureMap::from_text(&fm.to_text()).unwrap();
            prop_assert_eq!(back, fm);
        }
    }

    #[test]
    fn rejects_truncated_input() {
        let fm = FeatureMap::identity(2);
        let text = fm.to_text();
        assert!(FeatureMap::from_text(&text[..text.len() - 4]).is_err());
        assert!(FeatureMap::from_text("featuremap 2 dims 1 1").is_err());
    }
}
