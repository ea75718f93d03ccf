use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ModelConfig, ToyTransformer};
use crate::quant::{footprint_bytes, quantize_with, QuantSpec};
use crate::tensor::Tensor;

/// 1,064,960 base weights: a 2048-token vocabulary at width 128 with three
/// encoder and two decoder layers.
pub fn million_param_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 2048,
        d_model: 128,
        d_k: 128,
        encoder_layers: 3,
        decoder_layers: 2,
        max_len: 16,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub storage: String,
    pub elements: usize,
    /// Sum of the per-tensor byte accounting.
    pub reported_bytes: usize,
    /// Sum of the lengths of the actual serialized tensors.
    pub serialized_bytes: usize,
    pub bytes_per_element: f64,
    pub reduction_vs_16bit: f64,
}

/// bfloat16: the upper half of the f32 bit pattern.
pub fn to_bf16_bytes(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|&v| (((v as f32).to_bits() >> 16) as u16).to_le_bytes())
        .collect()
}

/// Stores every base weight of a freshly initialized model in 16-bit form and
/// under each of `specs`, and compares the byte counts.
pub fn footprint_table(config: &ModelConfig, seed: u64, specs: &[QuantSpec]) -> Result<Vec<FootprintRow>> {
    let model = ToyTransformer::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let weights: Vec<Tensor> = model
        .projections()
        .iter()
        .map(|p| p.base.materialize(&model.params))
        .collect::<Result<_>>()?;
    let elements: usize = weights.iter().map(Tensor::len).sum();
    let baseline = elements * 2;
    let serialized: usize = weights.iter().map(|w| to_bf16_bytes(w).len()).sum();
    let mut rows = vec![FootprintRow {
        storage: "bf16".into(),
        elements,
        reported_bytes: baseline,
        serialized_bytes: serialized,
        bytes_per_element: 2.0,
        reduction_vs_16bit: 0.0,
    }];
    for spec in specs {
        let (mut reported, mut serialized) = (0, 0);
        for w in &weights {
            let q = quantize_with(w, spec)?;
            reported += footprint_bytes(&q).total;
            serialized += q.to_bytes().len();
        }
        rows.push(FootprintRow {
            storage: spec_label(spec),
            elements,
            reported_bytes: reported,
            serialized_bytes: serialized,
            bytes_per_element: reported as f64 / elements as f64,
            reduction_vs_16bit: 1.0 - reported as f64 / baseline as f64,
        });
    }
    Ok(rows)
}

pub fn spec_label(spec: &QuantSpec) -> String {
    let g = match spec.granularity {
        crate::quant::Granularity::PerTensor => "tensor".to_string(),
        crate::quant::Granularity::PerRow => "row".to_string(),
        crate::quant::Granularity::PerBlock(b) => format!("block{b}"),
    };
    let dq = if spec.double_quant { "+dq" } else { "" };
    format!("{}/{g}{dq}", spec.scheme)
}

pub fn footprint_csv(rows: &[FootprintRow]) -> String {
    let mut out = String::from("storage,elements,reported_bytes,serialized_bytes,bytes_per_element,reduction_vs_16bit\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.storage, r.elements, r.reported_bytes, r.serialized_bytes, r.bytes_per_element, r.reduction_vs_16bit
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn million_config_size() {
        let c = million_param_config();
        let (v, d) = (c.vocab_size, c.d_model);
        let per_enc = 5 * d * d;
        let per_dec = 9 * d * d;
        assert_eq!(2 * v * d + 3 * per_enc + 2 * per_dec, 1_064_960);
    }

    #[test]
    fn small_model_rows_match_serialization() {
        let c = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            d_k: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            max_len: 8,
        };
        let rows = footprint_table(&c, 1, &[QuantSpec::int8_default(), QuantSpec::nf4_default()]).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.reported_bytes, r.serialized_bytes, "{}", r.storage);
        }
        assert_eq!(rows[0].elements, 2 * 16 * 8 + 5 * 64 + 9 * 64);
    }

    #[test]
    fn bf16_keeps_upper_bits() {
        let t = Tensor::from_vec(1, 2, vec![1.0, -2.5]).unwrap();
        let b = to_bf16_bytes(&t);
        assert_eq!(b, vec![0x80, 0x3f, 0x20, 0xc0]);
    }
}
