//! Versioned binary serialization of a network and its optional head.
//!
//! Layout (all integers little-endian, all scalars IEEE f64 little-endian):
//!
//! ```text
//! magic            8 bytes  "LCNNMDL\0"
//! version          u32      currently 1
//! layer_count      u32
//! per layer:
//!   in_dim         u32
//!   out_dim        u32
//!   activation     u8       0 = relu, 1 = identity
//!   weight         out_dim * in_dim f64, row-major
//!   bias           out_dim f64
//! head_present     u8       0 or 1
//! if present:
//!   attach_layer   u32      1-based activation index
//!   alpha          f64
//!   num_neurons    u32
//!   num_classes    u32
//!   owners         num_neurons u32
//!   transform      num_neurons^2 f64, row-major
//! ```
//!
//! Encoding a model and decoding it back is bit-exact. The decoder treats
//! its input as untrusted: every length is checked against the remaining
//! bytes before anything is allocated, and all failures are `Error::Decode`.

use std::path::Path;

use crate::head::{LabelConsistencyHead, NeuronAllocation};
use crate::nn::{Activation, Layer, Network};
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LCNNMDL\0";
const VERSION: u32 = 1;

const TAG_RELU: u8 = 0;
const TAG_IDENTITY: u8 = 1;

pub fn encode_model(net: &Network, head: Option<&LabelConsistencyHead>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.num_layers() as u32).to_le_bytes());
    for layer in net.layers() {
        out.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        out.push(match layer.activation() {
            Activation::Relu => TAG_RELU,
            Activation::Identity => TAG_IDENTITY,
        });
        for &v in layer.weight().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.bias() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match head {
        None => out.push(0),
        Some(head) => {
            out.push(1);
            out.extend_from_slice(&(head.attach_layer() as u32).to_le_bytes());
            out.extend_from_slice(&head.alpha().to_le_bytes());
            let alloc = head.allocation();
            out.extend_from_slice(&(alloc.num_neurons() as u32).to_le_bytes());
            out.extend_from_slice(&(alloc.num_classes() as u32).to_le_bytes());
            for &owner in alloc.owners() {
                out.extend_from_slice(&(owner as u32).to_le_bytes());
            }
            for &v in head.transform().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<(Network, Option<LabelConsistencyHead>)> {
    let mut cur = Cursor { bytes, pos: 0 };

    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Decode("bad magic".to_string()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Decode(format!(
            "unsupported format version {version}"
        )));
    }

    let layer_count = cur.u32()? as usize;
    let mut layers = Vec::new();
    for i in 0..layer_count {
        let in_dim = cur.u32()? as usize;
        let out_dim = cur.u32()? as usize;
        let tag = cur.u8()?;
        let activation = match tag {
            TAG_RELU => Activation::Relu,
            TAG_IDENTITY => Activation::Identity,
            other => {
                return Err(Error::Decode(format!(
                    "layer {i}: unknown activation tag {other}"
                )))
            }
        };
        let count = in_dim
            .checked_mul(out_dim)
            .ok_or_else(|| Error::Decode(format!("layer {i}: dimension overflow")))?;
        let weight_data = cur.f64_vec(count)?;
        let bias = cur.f64_vec(out_dim)?;
        let weight = DenseMatrix::from_vec(out_dim, in_dim, weight_data)
            .map_err(|e| Error::Decode(e.to_string()))?;
        layers
            .push(Layer::new(weight, bias, activation).map_err(|e| Error::Decode(e.to_string()))?);
    }
    let input_dim = layers
        .first()
        .map(Layer::in_dim)
        .ok_or_else(|| Error::Decode("model has zero layers".to_string()))?;
    let net = Network::new(input_dim, layers).map_err(|e| Error::Decode(e.to_string()))?;

    let head = match cur.u8()? {
        0 => None,
        1 => {
            let attach_layer = cur.u32()? as usize;
            let alpha = cur.f64()?;
            let num_neurons = cur.u32()? as usize;
            let num_classes = cur.u32()? as usize;
            let mut owners = Vec::new();
            for _ in 0..num_neurons {
                owners.push(cur.u32()? as usize);
            }
            let count = num_neurons
                .checked_mul(num_neurons)
                .ok_or_else(|| Error::Decode("head dimension overflow".to_string()))?;
            let transform_data = cur.f64_vec(count)?;
            let transform = DenseMatrix::from_vec(num_neurons, num_neurons, transform_data)
                .map_err(|e| Error::Decode(e.to_string()))?;
            let allocation = NeuronAllocation::from_owners(owners, num_classes)
                .map_err(|e| Error::Decode(e.to_string()))?;
            let head =
                LabelConsistencyHead::with_transform(attach_layer, alpha, allocation, transform)
                    .map_err(|e| Error::Decode(e.to_string()))?;
            if head.attach_layer() > net.num_layers() {
                return Err(Error::Decode(format!(
                    "head attaches at layer {} but the network has {} layers",
                    head.attach_layer(),
                    net.num_layers()
                )));
            }
            let width = net.layers()[head.attach_layer() - 1].out_dim();
            if head.num_neurons() != width {
                return Err(Error::Decode(format!(
                    "head has {} neurons but layer {} is {width} wide",
                    head.num_neurons(),
                    head.attach_layer()
                )));
            }
            Some(head)
        }
        other => {
            return Err(Error::Decode(format!("bad head flag {other}")));
        }
    };

    if cur.pos != bytes.len() {
        return Err(Error::Decode(format!(
            "{} trailing bytes after model",
            bytes.len() - cur.pos
        )));
    }
    Ok((net, head))
}

pub fn save_model(net: &Network, head: Option<&LabelConsistencyHead>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(net, head))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Network, Option<LabelConsistencyHead>)> {
    let bytes = std::fs::read(path)?;
    decode_model(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Decode(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let v = f64::from_le_bytes(b.try_into().expect("eight bytes"));
        if !v.is_finite() {
            return Err(Error::Decode(format!(
                "non-finite scalar at byte {}",
                self.pos - 8
            )));
        }
        Ok(v)
    }

    /// Checks the byte count against what is left before allocating.
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let byte_len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Decode(format!("length overflow at byte {}", self.pos)))?;
        if self.pos.saturating_add(byte_len) > self.bytes.len() {
            return Err(Error::Decode(format!("truncated at byte {}", self.pos)));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::allocate_neurons;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> (Network, LabelConsistencyHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = Network::init(
            3,
            &[
                (5, Activation::Relu),
                (4, Activation::Relu),
                (2, Activation::Identity),
            ],
            &mut rng,
        )
        .unwrap();
        let alloc = allocate_neurons(4, 2, &[1, 0]).unwrap();
        let head = LabelConsistencyHead::new(2, 0.05, alloc).unwrap();
        (net, head)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, head) = sample_model();
        let bytes = encode_model(&net, Some(&head));
        let (net2, head2) = decode_model(&bytes).unwrap();
        assert_eq!(net2, net);
        assert_eq!(head2.as_ref(), Some(&head));
        assert_eq!(encode_model(&net2, head2.as_ref()), bytes);
    }

    #[test]
    fn round_trip_without_head() {
        let (net, _) = sample_model();
        let bytes = encode_model(&net, None);
        let (net2, head2) = decode_model(&bytes).unwrap();
        assert_eq!(net2, net);
        assert!(head2.is_none());
        assert_eq!(encode_model(&net2, None), bytes);
    }

    #[test]
    fn every_truncation_errors_cleanly() {
        let (net, head) = sample_model();
        let bytes = encode_model(&net, Some(&head));
        for len in 0..bytes.len() {
            assert!(
                decode_model(&bytes[..len]).is_err(),
                "prefix of {len} bytes decoded"
            );
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let (net, head) = sample_model();
        let mut bytes = encode_model(&net, Some(&head));
        bytes.push(0);
        assert!(decode_model(&bytes).is_err());
    }

    #[test]
    fn corrupt_fields_rejected() {
        let (net, head) = sample_model();
        let good = encode_model(&net, Some(&head));

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode_model(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert!(decode_model(&bad_version).is_err());

        // Activation tag of the first layer sits after magic+version+counts
        // and the first layer's dims.
        let tag_pos = 8 + 4 + 4 + 4 + 4;
        let mut bad_tag = good.clone();
        bad_tag[tag_pos] = 7;
        assert!(decode_model(&bad_tag).is_err());

        let mut nan_weight = good.clone();
        nan_weight[tag_pos + 1..tag_pos + 9].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_model(&nan_weight).is_err());
    }

    #[test]
    fn inconsistent_head_dimensions_rejected() {
        let (net, _) = sample_model();
        let alloc = allocate_neurons(5, 2, &[0, 1]).unwrap();
        // 5 neurons cannot sit on layer 2, which is 4 wide.
        let head = LabelConsistencyHead::new(2, 0.1, alloc).unwrap();
        let bytes = encode_model(&net, Some(&head));
        assert!(decode_model(&bytes).is_err());
    }

    #[test]
    fn round_trip_random_models() {
        // Random shapes and parameters; decode(encode(m)) must reproduce
        // the exact bytes.
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = rng.random_range(1..=4);
            let mut spec = Vec::new();
            for _ in 0..depth {
                let width = rng.random_range(1..=7);
                let activation = if rng.random_range(0..2) == 0 {
                    Activation::Relu
                } else {
                    Activation::Identity
                };
                spec.push((width, activation));
            }
            let input_dim = rng.random_range(1..=5);
            let net = Network::init(input_dim, &spec, &mut rng).unwrap();

            let head = if rng.random_range(0..4) > 0 {
                let attach = rng.random_range(1..=depth);
                let width = net.layers()[attach - 1].out_dim();
                let m = rng.random_range(1..=width);
                let priority: Vec<usize> = (0..m).collect();
                let alloc = allocate_neurons(width, m, &priority).unwrap();
                let transform =
                    DenseMatrix::from_fn(width, width, |_, _| rng.random_range(-2.0..2.0));
                Some(
                    LabelConsistencyHead::with_transform(
                        attach,
                        rng.random_range(0.0..1.0),
                        alloc,
                        transform,
                    )
                    .unwrap(),
                )
            } else {
                None
            };

            let bytes = encode_model(&net, head.as_ref());
            let (net2, head2) = decode_model(&bytes).unwrap();
            assert_eq!(net2, net, "seed {seed}");
            assert_eq!(head2, head, "seed {seed}");
            assert_eq!(encode_model(&net2, head2.as_ref()), bytes, "seed {seed}");
        }
    }

    #[test]
    fn negative_zero_survives_round_trip() {
        let layer = Layer::new(
            DenseMatrix::from_vec(1, 2, vec![-0.0, 1.0]).unwrap(),
            vec![0.0],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(2, vec![layer]).unwrap();
        let bytes = encode_model(&net, None);
        let (net2, _) = decode_model(&bytes).unwrap();
        assert_eq!(
            net2.layers()[0].weight().data()[0].to_bits(),
            (-0.0f64).to_bits()
        );
    }
}
