use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::{Embedding, MappingError};
use crate::dataio::Image;
use crate::tensor::{
    checkpoint_bytes, load_checkpoint, Conv2d, Dense, ParamStore, Scalar, SeededRng, Tape, Tensor,
    TensorError, Var,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    /// Images are box-filtered to `image_size × image_size`.
    pub image_size: usize,
    /// Encoder channels; each level halves the resolution.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    /// Sample the bottleneck during training instead of passing the mean.
    pub variational: bool,
    /// Decoder levels also receive the upsampled bottleneck feature map.
    pub unet: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: vec![8, 16, 32],
            embedding_dim: 128,
            variational: false,
            unet: false,
        }
    }
}

impl MapConfig {
    fn base_side(&self) -> usize {
        self.image_size >> self.channels.len()
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: &str| Err(MappingError::InvalidConfig(m.into()));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("encoder channels must be non-empty and positive");
        }
        if self.embedding_dim == 0 {
            return bad("embedding dimension must be positive");
        }
        let levels = self.channels.len() as u32;
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << levels) {
            return bad("image size must be divisible by 2^levels");
        }
        Ok(())
    }
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MapForward {
    pub mean: Var,
    pub logvar: Var,
    /// Bottleneck fed to the decoder.
    pub z: Var,
    pub recon: Var,
}

#[derive(Debug, Clone)]
pub struct MapModel {
    pub config: MapConfig,
    pub store: ParamStore<f32>,
    encoder: Vec<Conv2d>,
    mean_head: Dense,
    logvar_head: Dense,
    expand: Dense,
    decoder: Vec<Conv2d>,
}

impl MapModel {
    pub fn new(config: MapConfig, seed: u64) -> Result<Self, MappingError> {
        config.validate()?;
        let mut rng = SeededRng::stream(seed, 0x6d6170);
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        let mut c_in = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            encoder.push(Conv2d::new(&mut store, &format!("map.enc{i}"), c_in, c, 3, 2, 1, &mut rng));
            c_in = c;
        }
        let side = config.base_side();
        let flat = c_in * side * side;
        let d = config.embedding_dim;
        let mean_head = Dense::new(&mut store, "map.mean", flat, d, &mut rng);
        let logvar_head = Dense::with_gain(&mut store, "map.logvar", flat, d, 0.0, &mut rng);
        let base = *config.channels.last().expect("validated");
        let expand = Dense::new(&mut store, "map.expand", d, base * side * side, &mut rng);
        let mut decoder = Vec::new();
        let mut c_in = base;
        let levels = config.channels.len();
        for level in 0..levels {
            let c_out = if level + 1 == levels {
                1
            } else {
                config.channels[levels - 2 - level]
            };
            let inputs = if config.unet { c_in + base } else { c_in };
            decoder.push(Conv2d::new(&mut store, &format!("map.dec{level}"), inputs, c_out, 3, 1, 1, &mut rng));
            c_in = c_out;
        }
        Ok(Self {
            config,
            store,
            encoder,
            mean_head,
            logvar_head,
            expand,
            decoder,
        })
    }

    /// Flattened `image_size²` input for one image.
    pub fn prepare(&self, image: &Image) -> Result<Vec<f32>, MappingError> {
        let s = self.config.image_size;
        image
            .resized_to(s)
            .map(|i| i.data().to_vec())
            .map_err(|_| MappingError::DimensionMismatch {
                expected: s,
                actual: (image.height(), image.width()),
            })
    }

    pub fn batch<T: Scalar>(&self, inputs: &[&[f32]]) -> Result<Tensor<T>, TensorError> {
        let s = self.config.image_size;
        let data = inputs
            .iter()
            .flat_map(|x| x.iter().map(|&v| T::from_f64(v as f64)))
            .collect();
        Tensor::new(vec![inputs.len(), 1, s, s], data)
    }

    /// Mean and log-variance heads, each `[N, D]`.
    pub fn encode_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var), TensorError> {
        let n = tape.shape(x)[0];
        let mut h = x;
        for conv in &self.encoder {
            let y = conv.forward(tape, store, h)?;
            h = tape.relu(y)?;
        }
        let flat = tape.reshape(h, &[n, tape.value(h).numel() / n])?;
        let mean = self.mean_head.forward(tape, store, flat)?;
        let logvar = self.logvar_head.forward(tape, store, flat)?;
        Ok((mean, logvar))
    }

    /// Reconstruction `[N, 1, S, S]` from a bottleneck `[N, D]`.
    pub fn decode_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: Var,
    ) -> Result<Var, TensorError> {
        let n = tape.shape(z)[0];
        let side = self.config.base_side();
        let base_c = *self.config.channels.last().expect("validated");
        let e = self.expand.forward(tape, store, z)?;
        let e = tape.relu(e)?;
        let base = tape.reshape(e, &[n, base_c, side, side])?;
        let (mut h, mut skip) = (base, base);
        let last = self.decoder.len() - 1;
        for (level, conv) in self.decoder.iter().enumerate() {
            h = tape.upsample2x(h)?;
            let input = if self.config.unet {
                skip = tape.upsample2x(skip)?;
                tape.concat(&[h, skip], 1)?
            } else {
                h
            };
            let y = conv.forward(tape, store, input)?;
            h = if level == last {
                tape.sigmoid(y)?
            } else {
                tape.relu(y)?
            };
        }
        Ok(h)
    }

    /// Full pass. With `noise` (`N·D` standard normals) and the variational
    /// flag on, the decoder sees `mean + exp(logvar/2)·noise`; otherwise the mean.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        noise: Option<&[f64]>,
    ) -> Result<MapForward, TensorError> {
        let (mean, logvar) = self.encode_var(tape, store, x)?;
        let z = match noise {
            Some(xi) if self.config.variational => self.sample(tape, mean, logvar, xi)?,
            _ => mean,
        };
        let recon = self.decode_var(tape, store, z)?;
        Ok(MapForward {
            mean,
            logvar,
            z,
            recon,
        })
    }

    fn sample<T: Scalar>(&self, tape: &mut Tape<T>, mean: Var, logvar: Var, xi: &[f64]) -> Result<Var, TensorError> {
        let shape = tape.shape(mean).to_vec();
        let half = tape.scale(logvar, 0.5)?;
        let sigma = tape.exp(half)?;
        let xi = tape.constant_f64(&shape, xi)?;
        let eps = tape.mul(sigma, xi)?;
        tape.add(mean, eps)
    }

    /// Bottleneck mean, the deterministic embedding used for maps.
    pub fn embed(&self, image: &Image) -> Result<Vec<f32>, MappingError> {
        Ok(self.embed_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn embed_batch(&self, images: &[Image]) -> Result<Vec<Vec<f32>>, MappingError> {
        let prepared = images
            .iter()
            .map(|i| self.prepare(i))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&[f32]> = prepared.iter().map(|v| v.as_slice()).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(self.batch(&refs)?);
        let (mean, _) = self.encode_var(&mut tape, &self.store, x)?;
        let d = self.config.embedding_dim;
        Ok(tape.value(mean).data().chunks_exact(d).map(<[f32]>::to_vec).collect())
    }

    /// Embedding of one frame: the mean when the variational flag is off,
    /// otherwise a reparameterised sample drawn from `rng`.
    pub fn encode(&self, frame_id: u64, image: &Image, rng: &mut SeededRng) -> Result<Embedding, MappingError> {
        let x = self.prepare(image)?;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(self.batch(&[&x])?);
        let (mean, logvar) = self.encode_var(&mut tape, &self.store, x)?;
        let out = if self.config.variational {
            let xi: Vec<f64> = (0..self.config.embedding_dim).map(|_| rng.normal()).collect();
            self.sample(&mut tape, mean, logvar, &xi)?
        } else {
            mean
        };
        Ok(Embedding {
            frame_id,
            values: tape.value(out).data().to_vec(),
        })
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&checkpoint_bytes(&self.store))
    }

    /// SHA-256 of the checkpoint bytes; identifies the model that built a map.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(checkpoint_bytes(&self.store)).into()
    }

    pub fn load(&mut self, r: &mut impl Read) -> Result<(), MappingError> {
        load_checkpoint(&mut self.store, r)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Image {
        let mut rng = SeededRng::new(seed);
        Image::new(16, 16, (0..256).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    fn config(variational: bool, unet: bool) -> MapConfig {
        MapConfig {
            image_size: 16,
            channels: vec![4, 8],
            embedding_dim: 6,
            variational,
            unet,
        }
    }

    #[test]
    fn deterministic_mean() {
        let m = MapModel::new(config(false, false), 1).unwrap();
        let mut rng = SeededRng::new(0);
        let a = m.encode(0, &image(3), &mut rng).unwrap();
        let b = m.encode(0, &image(3), &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values, m.embed(&image(3)).unwrap());
    }

    #[test]
    fn collapsed_variance_returns_mean() {
        let mut m = MapModel::new(config(true, true), 1).unwrap();
        let bias = m.store.find("map.logvar.bias").unwrap();
        m.store.get_mut(bias).value.data_mut().fill(-1e4);
        let e = m.encode(0, &image(5), &mut SeededRng::new(9)).unwrap();
        assert_eq!(e.values, m.embed(&image(5)).unwrap());
    }

    #[test]
    fn sampling_is_seeded() {
        let m = MapModel::new(config(true, false), 1).unwrap();
        let a = m.encode(0, &image(5), &mut SeededRng::new(9)).unwrap();
        let b = m.encode(0, &image(5), &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, m.embed(&image(5)).unwrap());
    }

    #[test]
    fn reconstruction_shape() {
        for unet in [false, true] {
            let m = MapModel::new(config(false, unet), 2).unwrap();
            let x = m.prepare(&image(1)).unwrap();
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(m.batch(&[&x, &x]).unwrap());
            let f = m.forward(&mut tape, &m.store, x, None).unwrap();
            assert_eq!(tape.shape(f.recon), &[2, 1, 16, 16]);
        }
    }

    #[test]
    fn wrong_image_size() {
        let m = MapModel::new(config(false, false), 2).unwrap();
        let img = Image::new(10, 10, vec![0.0; 100]).unwrap();
        assert!(matches!(m.embed(&img), Err(MappingError::DimensionMismatch { .. })));
    }
}
