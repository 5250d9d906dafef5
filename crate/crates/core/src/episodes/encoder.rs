use rand::Rng;

use super::{FEAT_CHANNELS, FEAT_SIZE, IMAGE_SIZE};
use crate::error::{Result, TbsError};
use crate::params::{Bound, ConvParams, LinearParams, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Scalar;

const PATCH: usize = 4;

/// 4×4 patch embedding, then a stride-2 and a stride-1 3×3 convolution.
/// Output stride is 4·2 = 8: a 64×64 image becomes 32×8×8 features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub patch_embed: LinearParams,
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl EncoderParams {
    pub fn init<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let c = FEAT_CHANNELS;
        EncoderParams {
            patch_embed: LinearParams::init(store, "enc.patch", PATCH * PATCH, c, true, rng),
            conv1: ConvParams::init(store, "enc.conv1", c, c, 2, rng),
            conv2: ConvParams::init(store, "enc.conv2", c, c, 1, rng),
        }
    }
}

/// `1×64×64` image → `32×8×8` features.
pub fn extract_features_chw<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &EncoderParams, image: Var) -> Result<Var> {
    if g.shape(image) != [1, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(TbsError::Shape {
            op: "extract_features",
            lhs: g.shape(image).to_vec(),
            rhs: vec![1, IMAGE_SIZE, IMAGE_SIZE],
        });
    }
    let grid = IMAGE_SIZE / PATCH;
    let patches = g.patchify(image, PATCH)?;
    let x = p.patch_embed.apply(g, b, patches)?;
    let x = g.relu(x);
    let x = g.transpose(x)?;
    let x = g.reshape(x, &[FEAT_CHANNELS, grid, grid])?;
    let x = p.conv1.apply(g, b, x)?;
    let x = g.relu(x);
    p.conv2.apply(g, b, x)
}

/// Same features laid out as `64×32` rows, one per cell in h-major order.
pub fn extract_features<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &EncoderParams, image: Var) -> Result<Var> {
    let chw = extract_features_chw(g, b, p, image)?;
    let flat = g.reshape(chw, &[FEAT_CHANNELS, FEAT_SIZE * FEAT_SIZE])?;
    g.transpose(flat)
}
