//! Siamese U-net generator: two parameter-disjoint encoders, the cloth
//! branch's skip features warped by the shared theta, a symmetric decoder
//! with instance normalization, and a tanh output head.
//!
//! The output image comes from the decoder alone; there is no pixel-level
//! composition path anywhere in this module.

use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{Buffer, Conv2d, ConvTranspose2d, Encoder, InstanceNorm2d, NormKind, Param,
    ENCODER_DEPTHS};
use crate::tensor::{self, Var};
use crate::tps::PadMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderBranch {
    E1,
    E2,
}

struct DecoderBlock {
    conv: Conv2d,
    norm1: InstanceNorm2d,
    up: ConvTranspose2d,
    norm2: InstanceNorm2d,
}

impl DecoderBlock {
    fn new(rng: &mut ChaCha8Rng, name: &str, in_c: usize, mid_c: usize, out_c: usize) -> Self {
        DecoderBlock {
            conv: Conv2d::new(rng, &format!("{name}.conv"), in_c, mid_c, 3, 1, 1, false),
            norm1: InstanceNorm2d::new(&format!("{name}.norm1"), mid_c),
            up: ConvTranspose2d::new(rng, &format!("{name}.up"), mid_c, out_c, 4, 2, 1, false),
            norm2: InstanceNorm2d::new(&format!("{name}.norm2"), out_c),
        }
    }

    fn forward(&self, x: &Var) -> Var {
        let y = tensor::relu(&self.norm1.forward(&self.conv.forward(x)));
        tensor::relu(&self.norm2.forward(&self.up.forward(&y)))
    }

    fn params(&self) -> Vec<Rc<Param>> {
        let mut p = self.conv.params();
        p.extend(self.norm1.params());
        p.extend(self.up.params());
        p.extend(self.norm2.params());
        p
    }
}

pub struct Generator {
    encoder_e1: Encoder,
    encoder_e2: Encoder,
    blocks: Vec<DecoderBlock>,
    out_conv: Conv2d,
}

impl Generator {
    pub fn new(rng: &mut ChaCha8Rng, standard_k: usize, strided_k: usize) -> Generator {
        let encoder_e1 = Encoder::new(rng, "gen.e1", 3, NormKind::Instance, standard_k, strided_k);
        let encoder_e2 = Encoder::new(rng, "gen.e2", 3, NormKind::Instance, standard_k, strided_k);
        let d = ENCODER_DEPTHS;
        // Bottleneck fuses both encoders' deepest maps; after each
        // upsampling the decoder concatenates [decoder, warped-E1, E2]
        // skips of the next shallower scale.
        let mut blocks = Vec::new();
        for i in 0..5 {
            let scale = 4 - i; // encoder level whose output feeds this block
            let mid = d[scale];
            let out = if scale == 0 { d[0] } else { d[scale - 1] };
            let in_c = if i == 0 { 2 * d[4] } else { 3 * d[scale] };
            blocks.push(DecoderBlock::new(
                rng,
                &format!("gen.dec{i}"),
                in_c,
                mid,
                out,
            ));
        }
        let out_conv = Conv2d::new(rng, "gen.out", d[0], 3, 3, 1, 1, true);
        Generator {
            encoder_e1,
            encoder_e2,
            blocks,
            out_conv,
        }
    }

    /// Five-level feature pyramid of one branch.
    pub fn encode(&self, input: &Var, branch: EncoderBranch) -> Result<Vec<Var>> {
        let (h, w) = (input.shape()[2], input.shape()[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::contract(format!(
                "generator input {h}x{w} must be divisible by 32"
            )));
        }
        let enc = match branch {
            EncoderBranch::E1 => &self.encoder_e1,
            EncoderBranch::E2 => &self.encoder_e2,
        };
        Ok(enc.forward_pyramid(input, false))
    }

    /// Decode warped cloth and person pyramids into an image in `[-1, 1]`.
    pub fn decode(&self, warped_cloth_pyr: &[Var], person_pyr: &[Var]) -> Result<Var> {
        if warped_cloth_pyr.len() != 5 || person_pyr.len() != 5 {
            return Err(Error::contract("decoder expects 5-level pyramids"));
        }
        for (a, b) in warped_cloth_pyr.iter().zip(person_pyr.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::contract(format!(
                    "pyramid level shape mismatch {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        let mut x = tensor::concat_channels(&[&warped_cloth_pyr[4], &person_pyr[4]]);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x);
            if i < 4 {
                let scale = 3 - i;
                x = tensor::concat_channels(&[&x, &warped_cloth_pyr[scale], &person_pyr[scale]]);
            }
        }
        Ok(tensor::tanh(&self.out_conv.forward(&x)))
    }

    /// Full conditional generation: encode both branches, warp the cloth
    /// pyramid with the shared theta at every scale, decode.
    pub fn generate(&self, agnostic: &Var, cloth: &Var, theta: &Var) -> Result<Var> {
        let cloth_pyr = self.encode(cloth, EncoderBranch::E1)?;
        let person_pyr = self.encode(agnostic, EncoderBranch::E2)?;
        let warped: Vec<Var> = cloth_pyr
            .iter()
            .map(|level| tensor::bilinear_warp(level, theta, PadMode::Border))
            .collect();
        self.decode(&warped, &person_pyr)
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        let mut p = self.encoder_e1.params();
        p.extend(self.encoder_e2.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.out_conv.params());
        p
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer>> {
        // instance norm keeps no running statistics
        Vec::new()
    }

    pub fn encoder_params(&self, branch: EncoderBranch) -> Vec<Rc<Param>> {
        match branch {
            EncoderBranch::E1 => self.encoder_e1.params(),
            EncoderBranch::E2 => self.encoder_e2.params(),
        }
    }

    pub fn decoder_params(&self) -> Vec<Rc<Param>> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.out_conv.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tps::TpsTheta;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_image(shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(ArrayD::from_shape_fn(IxDyn(shape), |_| {
            rng.gen_range(-1.0f32..1.0)
        }))
    }

    fn identity_theta_batch(b: usize) -> Var {
        let row: Vec<f32> = TpsTheta::identity()
            .values()
            .iter()
            .map(|&v| v as f32)
            .collect();
        let mut data = Vec::new();
        for _ in 0..b {
            data.extend_from_slice(&row);
        }
        Var::constant(ArrayD::from_shape_vec(IxDyn(&[b, 50]), data).unwrap())
    }

    #[test]
    fn encoder_pyramid_shapes_256x192() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Generator::new(&mut rng, 3, 4);
        let x = rand_image(&[1, 3, 256, 192], 0);
        let pyr = g.encode(&x, EncoderBranch::E1).unwrap();
        let expect = [
            [1usize, 16, 128, 96],
            [1, 32, 64, 48],
            [1, 64, 32, 24],
            [1, 128, 16, 12],
            [1, 256, 8, 6],
        ];
        for (level, shape) in pyr.iter().zip(expect.iter()) {
            assert_eq!(level.shape(), shape);
        }
    }

    #[test]
    fn encode_is_deterministic_and_branches_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Generator::new(&mut rng, 3, 4);
        let x = rand_image(&[1, 3, 64, 64], 1);
        let a = g.encode(&x, EncoderBranch::E1).unwrap();
        let b = g.encode(&x, EncoderBranch::E1).unwrap();
        for (l1, l2) in a.iter().zip(b.iter()) {
            assert_eq!(l1.value(), l2.value());
        }
        let c = g.encode(&x, EncoderBranch::E2).unwrap();
        assert_ne!(a[4].value(), c[4].value());
    }

    #[test]
    fn generate_output_shape_range_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Generator::new(&mut rng, 3, 4);
        let agnostic = rand_image(&[2, 3, 64, 64], 2);
        let cloth = rand_image(&[2, 3, 64, 64], 3);
        let theta = identity_theta_batch(2);
        let out = g.generate(&agnostic, &cloth, &theta).unwrap();
        assert_eq!(out.shape(), agnostic.shape());
        for v in out.value().iter() {
            assert!(v.is_finite() && *v >= -1.0 && *v <= 1.0);
        }
        // zero pyramids stay finite
        let zeros: Vec<Var> = [(32usize, 16usize), (16, 32), (8, 64), (4, 128), (2, 256)]
            .iter()
            .map(|&(s, c)| Var::constant(ArrayD::zeros(IxDyn(&[1, c, s, s]))))
            .collect();
        let out = g.decode(&zeros, &zeros).unwrap();
        assert!(out.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_theta_equals_plain_forward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Generator::new(&mut rng, 3, 4);
        let agnostic = rand_image(&[1, 3, 64, 64], 7);
        let cloth = rand_image(&[1, 3, 64, 64], 8);
        let theta = identity_theta_batch(1);
        let warped = g.generate(&agnostic, &cloth, &theta).unwrap();
        // plain siamese forward: no warp at all
        let cloth_pyr = g.encode(&cloth, EncoderBranch::E1).unwrap();
        let person_pyr = g.encode(&agnostic, EncoderBranch::E2).unwrap();
        let plain = g.decode(&cloth_pyr, &person_pyr).unwrap();
        assert_eq!(warped.value(), plain.value());
    }

    #[test]
    fn decode_differentiable_wrt_both_pyramids() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Generator::new(&mut rng, 3, 4);
        let mk = |seed: u64| -> Vec<Var> {
            [(32usize, 16usize), (16, 32), (8, 64), (4, 128), (2, 256)]
                .iter()
                .enumerate()
                .map(|(i, &(s, c))| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed + i as u64);
                    Var::leaf(ArrayD::from_shape_fn(IxDyn(&[1, c, s, s]), |_| {
                        r.gen_range(-1.0f32..1.0)
                    }))
                })
                .collect()
        };
        let cloth_pyr = mk(100);
        let person_pyr = mk(200);
        let out = g.decode(&cloth_pyr, &person_pyr).unwrap();
        let loss = tensor::mean_all(&tensor::square(&out));
        let grads = loss.backward();
        for level in cloth_pyr.iter().chain(person_pyr.iter()) {
            let norm: f32 = grads
                .get_or_zeros(level)
                .iter()
                .map(|g| g * g)
                .sum();
            assert!(norm > 0.0);
        }
    }

    #[test]
    fn gradient_reaches_theta_through_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = Generator::new(&mut rng, 3, 4);
        let agnostic = rand_image(&[1, 3, 64, 64], 11);
        let cloth = rand_image(&[1, 3, 64, 64], 12);
        let mut row: Vec<f32> = TpsTheta::identity()
            .values()
            .iter()
            .map(|&v| v as f32)
            .collect();
        row[14] += 0.05; // off-identity so the warp actually samples
        let theta = Var::leaf(ArrayD::from_shape_vec(IxDyn(&[1, 50]), row).unwrap());
        let out = g.generate(&agnostic, &cloth, &theta).unwrap();
        let loss = tensor::mean_all(&tensor::square(&out));
        let grads = loss.backward();
        let norm: f32 = grads.get_or_zeros(&theta).iter().map(|g| g * g).sum();
        assert!(norm > 0.0, "no gradient reached theta");
    }
}
