//! Network assembly: main encoder `enc`, decoder `dec` and the optional
//! reconstruction branch `ssrae`.

use farmamba_core::encoder::{Decoder, Encoder, EncoderOutput};
use farmamba_core::layers::{Binding, Init};
use farmamba_core::ssrae::{tie_weights, Ssrae};
use farmamba_core::{Float, Graph, ParamTree, Var};

use crate::config::RunConfig;
use crate::Result;

pub const ENC: &str = "enc";
pub const DEC: &str = "dec";
pub const AUX: &str = "ssrae";

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub ssrae: Option<Ssrae>,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let enc_cfg = cfg.encoder_config();
        let encoder = Encoder::new(ENC, enc_cfg.clone())?;
        let decoder = Decoder::new(DEC, enc_cfg)?;
        let sc = cfg.ssrae_config();
        let ssrae = if sc.enabled {
            Some(Ssrae::with_msfm(AUX, sc, &encoder, Some(cfg.msfm_template()))?)
        } else {
            None
        };
        Ok(Self {
            encoder,
            decoder,
            ssrae,
        })
    }

    pub fn stages(&self) -> usize {
        self.encoder.cfg.stages()
    }

    pub fn init_params<T: Float>(&self, seed: u64) -> Result<ParamTree<T>> {
        let init = Init::new(seed);
        let mut tree = ParamTree::new();
        self.encoder.init_params(&mut tree, &init, self.stages())?;
        self.decoder.init_params(&mut tree, &init)?;
        if let Some(aux) = &self.ssrae {
            aux.init_params(&mut tree, &init)?;
        }
        Ok(tree)
    }

    /// Copies the main encoder weights into an untied auxiliary encoder.
    pub fn copy_main_into_aux<T: Float>(&self, tree: &mut ParamTree<T>) -> usize {
        match &self.ssrae {
            Some(aux) => tie_weights(tree, ENC, aux),
            None => 0,
        }
    }

    /// Logits `[B,K,H,W]` and the encoder features.
    pub fn segment<T: Float>(&self, g: &mut Graph<T>, p: &Binding, image: Var) -> Result<(Var, EncoderOutput)> {
        let out = self.encoder.encode(g, p, image, self.stages())?;
        let logits = self.decoder.decode(g, p, &out)?;
        Ok((logits, out))
    }

    /// Multiple the input extents must satisfy for every active branch.
    pub fn input_multiple(&self) -> usize {
        let main = self.encoder.cfg.reduction();
        match &self.ssrae {
            Some(aux) => lcm(main, aux.input_multiple()),
            None => main,
        }
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}
