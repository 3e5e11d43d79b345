use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};

/// Whether parameters enter a graph as trainable leaves or constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
}

fn load(g: &mut Graph, ps: &ParamStore, id: ParamId, mode: Mode) -> Var {
    match mode {
        Mode::Train => g.param(ps, id),
        Mode::Frozen => g.frozen_param(ps, id),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_he(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mode: Mode) -> Var {
        let w = load(g, ps, self.w, mode);
        let b = load(g, ps, self.b, mode);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let w = ps.add_he(format!("{name}.w"), &[cout, cin], cin, rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    /// Weight drawn with an explicit standard deviation (output layers).
    pub fn with_std<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_normal(format!("{name}.w"), &[cout, cin], std, rng);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mode: Mode) -> Var {
        let w = load(g, ps, self.w, mode);
        let b = load(g, ps, self.b, mode);
        g.linear(x, w, b)
    }
}

/// 1×1 convolution applied to pooled region features laid out `[N, C * S]`.
#[derive(Clone, Debug)]
pub struct ChannelProjection {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
}

impl ChannelProjection {
    /// Initialised to the identity map.
    pub fn identity(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let mut eye = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            eye.data_mut()[i * channels + i] = 1.0;
        }
        let w = ps.add(format!("{name}.w"), eye);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[channels]));
        Self { w, b, channels }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, mode: Mode) -> Var {
        let w = load(g, ps, self.w, mode);
        let b = load(g, ps, self.b, mode);
        g.channel_mix(x, w, b, self.channels)
    }
}
