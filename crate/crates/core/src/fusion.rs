//! Hybrid token fusion: a learnable query cross-attends over the patch
//! tokens, the sigmoid of the attended value gates the CLS token, and a
//! small MLP shapes the result. The plain pooling baselines live here
//! too.

use serde::{Deserialize, Serialize};

use crate::encoder::{patch_rows, EncodedSequence};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Cls,
    Avg,
    ClsPlusAvg,
    Hybrid,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cls" => Ok(PoolMode::Cls),
            "avg" => Ok(PoolMode::Avg),
            "cls_plus_avg" => Ok(PoolMode::ClsPlusAvg),
            "hybrid" => Ok(PoolMode::Hybrid),
            other => Err(Error::UnknownPoolMode(other.into())),
        }
    }
}

/// Gated CLS fusion over the patch tokens; memory tokens never enter.
pub fn fuse<E: Scalar>(
    tape: &Tape<E>,
    enc: &EncodedSequence,
    params: &ModelParams<Var>,
) -> Result<Var> {
    if enc.v == 0 {
        return Err(Error::NoPatchTokens);
    }
    let d = tape.shape_of(enc.embeddings)[1];
    let cls = tape.slice_rows(enc.embeddings, 0, 1);
    let patches = patch_rows(tape, enc);

    // single-head cross-attention: the raw learnable query attends over
    // projected keys, values project back to width d
    let keys = tape.matmul(patches, params.fusion.wk);
    let values = tape.matmul(patches, params.fusion.wv);
    let scores = tape.scale(
        tape.matmul_nt(params.fusion.q_patch, keys),
        1.0 / (d as f64).sqrt(),
    );
    let probs = tape.softmax_rows(scores);
    let attended = tape.matmul(probs, values);

    let gate = tape.sigmoid(attended);
    let fused = tape.mul(cls, gate);
    let h = tape.add_row(
        tape.matmul(fused, params.fusion.mlp_in.w),
        params.fusion.mlp_in.b,
    );
    let h = tape.gelu(h);
    Ok(tape.add_row(
        tape.matmul(h, params.fusion.mlp_out.w),
        params.fusion.mlp_out.b,
    ))
}

/// Token pooling dispatch: the representation handed to the classifier.
pub fn pool<E: Scalar>(
    tape: &Tape<E>,
    enc: &EncodedSequence,
    mode: PoolMode,
    params: &ModelParams<Var>,
) -> Result<Var> {
    if enc.v == 0 {
        return Err(Error::NoPatchTokens);
    }
    match mode {
        PoolMode::Cls => Ok(tape.slice_rows(enc.embeddings, 0, 1)),
        PoolMode::Avg => Ok(tape.mean_rows(patch_rows(tape, enc))),
        PoolMode::ClsPlusAvg => {
            let cls = tape.slice_rows(enc.embeddings, 0, 1);
            let avg = tape.mean_rows(patch_rows(tape, enc));
            Ok(tape.add(cls, avg))
        }
        PoolMode::Hybrid => fuse(tape, enc, params),
    }
}
