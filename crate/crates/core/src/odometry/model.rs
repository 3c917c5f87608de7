use std::io::{Read, Write};

use super::{check_flow, OdometryError, PoseDelta};
use crate::dataio::FlowField;
use crate::tensor::{
    checkpoint_bytes, load_checkpoint, Conv2d, Dense, ParamStore, Scalar, SeededRng, Tape, Tensor,
    TensorError, Var,
};
use nalgebra::Vector3;

/// Architecture of the VO regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct VoConfig {
    /// Flow is block-averaged to `input_size × input_size` before the first layer.
    pub input_size: usize,
    /// Multiplier applied to the (downsampled) pixel displacements.
    pub flow_scale: f64,
    /// Output channels of the stride-2 convolutions.
    pub channels: Vec<usize>,
    pub hidden: usize,
    /// Output multipliers for the translation and rotation heads.
    pub trans_scale: f64,
    pub rot_scale: f64,
}

impl Default for VoConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            flow_scale: 0.25,
            channels: vec![16, 32, 32],
            hidden: 128,
            trans_scale: 1.0,
            rot_scale: 0.05,
        }
    }
}

impl VoConfig {
    fn feature_side(&self) -> usize {
        self.channels
            .iter()
            .fold(self.input_size, |s, _| (s + 2 - 3) / 2 + 1)
    }

    pub fn validate(&self) -> Result<(), OdometryError> {
        let bad = |m: &str| Err(OdometryError::InvalidConfig(m.into()));
        if self.input_size < 4 {
            return bad("input size must be at least 4");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be non-empty and positive");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        if !(self.flow_scale > 0.0 && self.trans_scale > 0.0 && self.rot_scale > 0.0) {
            return bad("scales must be positive");
        }
        Ok(())
    }
}

/// Convolutional flow encoder followed by a dense regressor to 6 outputs.
/// The last layer starts at zero, so an untrained model predicts no motion.
#[derive(Debug, Clone)]
pub struct VoModel {
    pub config: VoConfig,
    pub store: ParamStore<f32>,
    convs: Vec<Conv2d>,
    hidden: Dense,
    head: Dense,
}

impl VoModel {
    pub fn new(config: VoConfig, seed: u64) -> Result<Self, OdometryError> {
        config.validate()?;
        let mut rng = SeededRng::stream(seed, 0x766f);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut c_in = 2;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("vo.conv{i}"), c_in, c, 3, 2, 1, &mut rng));
            c_in = c;
        }
        let side = config.feature_side();
        let hidden = Dense::new(&mut store, "vo.fc", c_in * side * side, config.hidden, &mut rng);
        let head = Dense::with_gain(&mut store, "vo.head", config.hidden, 6, 0.0, &mut rng);
        Ok(Self {
            config,
            store,
            convs,
            hidden,
            head,
        })
    }

    /// Channel-first `[2, S, S]` network input for one flow field.
    pub fn prepare(&self, flow: &FlowField) -> Result<Vec<f32>, OdometryError> {
        let factor = check_flow(flow, self.config.input_size)?;
        let small = flow.downsample(factor)?;
        let s = self.config.input_size;
        let scale = self.config.flow_scale as f32;
        let mut out = vec![0.0f32; 2 * s * s];
        for y in 0..s {
            for x in 0..s {
                let (u, v) = small.at(y, x);
                out[y * s + x] = u * scale;
                out[s * s + y * s + x] = v * scale;
            }
        }
        Ok(out)
    }

    /// Stacks prepared inputs into an `[N, 2, S, S]` tensor.
    pub fn batch<T: Scalar>(&self, inputs: &[&[f32]]) -> Result<Tensor<T>, TensorError> {
        let s = self.config.input_size;
        let data = inputs
            .iter()
            .flat_map(|x| x.iter().map(|&v| T::from_f64(v as f64)))
            .collect();
        Tensor::new(vec![inputs.len(), 2, s, s], data)
    }

    /// `[N, 2, S, S] → [N, 6]` with columns `(tx, ty, tz, rx, ry, rz)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: Var,
    ) -> Result<Var, TensorError> {
        let n = tape.shape(input)[0];
        let mut x = input;
        for conv in &self.convs {
            let y = conv.forward(tape, store, x)?;
            x = tape.relu(y)?;
        }
        let x = tape.reshape(x, &[n, tape.value(x).numel() / n])?;
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let out = self.head.forward(tape, store, h)?;
        let (ts, rs) = (self.config.trans_scale, self.config.rot_scale);
        let scales: Vec<f64> = (0..n).flat_map(|_| [ts, ts, ts, rs, rs, rs]).collect();
        let scales = tape.constant_f64(&[n, 6], &scales)?;
        tape.mul(out, scales)
    }

    pub fn predict_batch(&self, flows: &[FlowField]) -> Result<Vec<PoseDelta>, OdometryError> {
        if flows.is_empty() {
            return Ok(Vec::new());
        }
        let prepared = flows
            .iter()
            .map(|f| self.prepare(f))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&[f32]> = prepared.iter().map(|v| v.as_slice()).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(self.batch(&refs)?);
        let out = self.forward(&mut tape, &self.store, x)?;
        Ok(tape
            .value(out)
            .data()
            .chunks_exact(6)
            .map(|o| {
                let o: Vec<f64> = o.iter().map(|&v| v as f64).collect();
                PoseDelta::new(
                    Vector3::new(o[0], o[1], o[2]),
                    Vector3::new(o[3], o[4], o[5]),
                )
            })
            .collect())
    }

    pub fn predict_delta(&self, flow: &FlowField) -> Result<PoseDelta, OdometryError> {
        Ok(self.predict_batch(std::slice::from_ref(flow))?[0])
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&checkpoint_bytes(&self.store))
    }

    pub fn load(&mut self, r: &mut impl Read) -> Result<(), OdometryError> {
        load_checkpoint(&mut self.store, r)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VoConfig {
        VoConfig {
            input_size: 8,
            channels: vec![4, 4],
            hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn untrained_predicts_zero() {
        let m = VoModel::new(small(), 3).unwrap();
        let flow = FlowField::new(16, 16, (0..512).map(|i| (i % 7) as f32 - 3.0).collect()).unwrap();
        assert_eq!(m.predict_delta(&flow).unwrap(), PoseDelta::zero());
    }

    #[test]
    fn rejects_wrong_flow_size() {
        let m = VoModel::new(small(), 3).unwrap();
        assert!(matches!(
            m.predict_delta(&FlowField::zeros(12, 12)),
            Err(OdometryError::DimensionMismatch { .. })
        ));
        assert!(m.predict_delta(&FlowField::zeros(4, 4)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = VoModel::new(small(), 1).unwrap();
        let mut b = VoModel::new(small(), 2).unwrap();
        let mut bytes = Vec::new();
        a.save(&mut bytes).unwrap();
        b.load(&mut bytes.as_slice()).unwrap();
        assert_eq!(checkpoint_bytes(&b.store), bytes);
    }
}
