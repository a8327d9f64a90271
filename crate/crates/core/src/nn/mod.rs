//! A small fixed-architecture neural toolkit: tensors, the glyph CNN with
//! analytic gradients, Adam, and per-glyph pretraining.

mod adam;
mod cnn;
mod gemm;
mod tensor;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use cnn::{cnn_backward, cnn_forward, forward_batch, softmax, CnnConfig, CnnParams, ForwardCache, Mode, Upstream, PARAM_NAMES};
pub use tensor::Tensor;
pub use train::{glyph_accuracy, loss_record_csv, predict_sequence, pretrain_cnn, xent_logit_grad, PretrainConfig};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::checkpoint::{read_sections, take_section, write_sections};
use crate::CheckpointError;

/// Header line of CNN checkpoint files.
pub const CNN_HEADER: &str = "#nester-cnn v1";

impl CnnParams {
    pub fn write_to<W: Write>(&self, w: W) -> Result<(), CheckpointError> {
        let dropout = [self.dropout_prob];
        let mut sections: Vec<(&str, &[usize], &[f64])> =
            PARAM_NAMES.iter().zip(self.tensors()).map(|(n, t)| (*n, t.shape(), t.data())).collect();
        sections.push(("dropout_prob", &[1], &dropout));
        write_sections(w, CNN_HEADER, &sections)
    }

    pub fn read_from<R: Read>(r: R) -> Result<CnnParams, CheckpointError> {
        let mut sections = read_sections(BufReader::new(r), CNN_HEADER)?;
        let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
        for name in PARAM_NAMES {
            let s = take_section(&mut sections, name, None)?;
            let t = Tensor::from_vec(&s.shape, s.values).map_err(|e| CheckpointError::Parse { line: 0, msg: format!("{name}: {e}") })?;
            tensors.push(t);
        }
        let dropout_prob = take_section(&mut sections, "dropout_prob", Some(&[1]))?.values[0];
        if let Some(extra) = sections.first() {
            return Err(CheckpointError::Parse { line: 0, msg: format!("unexpected section {}", extra.name) });
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("eight tensors");
        let params = CnnParams {
            conv1_weight: next(),
            conv1_bias: next(),
            conv2_weight: next(),
            conv2_bias: next(),
            dense_weight: next(),
            dense_bias: next(),
            output_weight: next(),
            output_bias: next(),
            dropout_prob,
        };
        params.check_shapes().map_err(|e| CheckpointError::Parse { line: 0, msg: e.to_string() })?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CnnParams, CheckpointError> {
        CnnParams::read_from(File::open(path)?)
    }
}
