//! Layer builders: small structs that own `ParamRef`s and know how to run
//! themselves on a tape.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::tape::{Conv2dSpec, Tape, TensorId};
use crate::nn::{init, ParamBinding, ParamRef, ParamSet};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamRef,
    pub b: ParamRef,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let w = ps.add(format!("{name}.w"), init::he_normal(rng, &[cout, cin, k, k], fan_in))?;
        let b = ps.add(format!("{name}.b"), init::zeros(&[cout]))?;
        Ok(Conv2d { w, b, spec })
    }

    pub fn forward(&self, t: &mut Tape, bind: &ParamBinding, x: TensorId) -> Result<TensorId> {
        t.conv2d(x, bind.id(self.w), Some(bind.id(self.b)), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamRef,
    pub b: ParamRef,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), init::he_normal(rng, &[n_out, n_in], n_in))?;
        let b = ps.add(format!("{name}.b"), init::zeros(&[n_out]))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, t: &mut Tape, bind: &ParamBinding, x: TensorId) -> Result<TensorId> {
        t.linear(x, bind.id(self.w), bind.id(self.b))
    }
}

/// Two 3x3 convolutions with a residual connection. The skip path gets a
/// 1x1 projection when channels or stride change.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let spec1 = Conv2dSpec { stride, pad: dilation, dilation };
        let spec2 = Conv2dSpec { stride: 1, pad: dilation, dilation };
        let conv1 = Conv2d::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, spec1)?;
        let conv2 = Conv2d::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, spec2)?;
        let skip = if cin != cout || stride != 1 {
            Some(Conv2d::new(
                ps,
                rng,
                &format!("{name}.skip"),
                cin,
                cout,
                1,
                Conv2dSpec { stride, pad: 0, dilation: 1 },
            )?)
        } else {
            None
        };
        Ok(ResidualBlock { conv1, conv2, skip })
    }

    pub fn forward(&self, t: &mut Tape, bind: &ParamBinding, x: TensorId) -> Result<TensorId> {
        let h = self.conv1.forward(t, bind, x)?;
        let h = t.relu(h);
        let h = self.conv2.forward(t, bind, h)?;
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(t, bind, x)?,
            None => x,
        };
        let sum = t.add(h, shortcut)?;
        Ok(t.relu(sum))
    }
}
