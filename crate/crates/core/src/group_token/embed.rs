use super::{GroupRepresentation, GteConfig};
use crate::error::{Error, Result};
use crate::layers::{grouped_linear, planes_to_tokens, tokens_to_planes};
use crate::params::{Binder, Initializer, Param, ParamSet};
use crate::tensor::{ChannelGrouping, Element, Tensor};

/// Weights of the token embedding: a 3×3 convolution with `G` channel
/// groups followed by a per-group MLP `C -> 2C -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct GteParams<T: Element = f32> {
    /// `[G·C, (2K/G)·2P², 3, 3]`
    pub conv_w: Param<T>,
    pub conv_b: Param<T>,
    /// `[G, C, 2C]`
    pub fc1_w: Param<T>,
    pub fc1_b: Param<T>,
    /// `[G, 2C, C]`
    pub fc2_w: Param<T>,
    pub fc2_b: Param<T>,
}

impl<T: Element> GteParams<T> {
    pub fn init(cfg: &GteConfig, init: &mut Initializer) -> Result<Self> {
        cfg.validate()?;
        let (g, c) = (cfg.g, cfg.channels_per_group());
        Ok(Self {
            conv_w: init.trunc_normal("gte.conv.weight", vec![g * c, cfg.rep_channels_per_group(), 3, 3]),
            conv_b: Param::zeros("gte.conv.bias", vec![g * c]),
            fc1_w: init.trunc_normal("gte.fc1.weight", vec![g, c, 2 * c]),
            fc1_b: Param::zeros("gte.fc1.bias", vec![g * 2 * c]),
            fc2_w: init.trunc_normal("gte.fc2.weight", vec![g, 2 * c, c]),
            fc2_b: Param::zeros("gte.fc2.bias", vec![g * c]),
        })
    }
}

impl<T: Element> ParamSet<T> for GteParams<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.conv_w, &self.conv_b, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

/// Embeds an encoded representation into `[tokens, G·C]`.
pub fn group_token_embed<T: Element>(
    rep: &GroupRepresentation,
    params: &GteParams<T>,
    cfg: &GteConfig,
    binder: &Binder<T>,
) -> Result<Tensor<T>> {
    let x = Tensor::new(
        vec![rep.tokens(), rep.channels],
        rep.data.iter().map(|&v| T::cast(f64::from(v))).collect(),
    )?;
    group_token_embed_tensor(&x, rep.grid, params, cfg, binder)
}

/// [`group_token_embed`] on a `[tokens, 2K·2P²]` tensor, so the input can
/// itself be differentiated.
pub fn group_token_embed_tensor<T: Element>(
    x: &Tensor<T>,
    grid: (usize, usize),
    params: &GteParams<T>,
    cfg: &GteConfig,
    binder: &Binder<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if x.rank() != 2 || x.shape()[1] != cfg.rep_channels() {
        return Err(Error::ShapeMismatch(format!(
            "embedding expects [tokens, {}], got {:?}",
            cfg.rep_channels(),
            x.shape()
        )));
    }
    let planes = tokens_to_planes(x, grid)?;
    let grouping = ChannelGrouping::standard(cfg.rep_channels(), cfg.g)?;
    let conv = planes.conv2d(&binder.bind(&params.conv_w), Some(&binder.bind(&params.conv_b)), grouping)?;
    let tokens = planes_to_tokens(&conv)?;
    let hidden = grouped_linear(&tokens, &binder.bind(&params.fc1_w), &binder.bind(&params.fc1_b))?.gelu();
    grouped_linear(&hidden, &binder.bind(&params.fc2_w), &binder.bind(&params.fc2_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_zero_bias_gives_zero_tokens() {
        let cfg = GteConfig::new(2, 2, 4, 8).unwrap();
        let params = GteParams::<f64>::init(&cfg, &mut Initializer::new(0, 0.02)).unwrap();
        let rep = GroupRepresentation::zeros((3, 2), cfg.rep_channels());
        let y = group_token_embed(&rep, &params, &cfg, &Binder::inference()).unwrap();
        assert_eq!(y.shape(), &[6, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_shape() {
        let cfg = GteConfig::new(12, 4, 12, 48).unwrap();
        let params = GteParams::<f32>::init(&cfg, &mut Initializer::new(0, 0.02)).unwrap();
        assert_eq!(params.conv_w.shape, vec![48, 64, 3, 3]);
        let rep = GroupRepresentation::zeros(cfg.token_grid(128, 128), cfg.rep_channels());
        let y = group_token_embed(&rep, &params, &cfg, &Binder::inference()).unwrap();
        assert_eq!(y.shape(), &[1024, 48]);
    }
}
