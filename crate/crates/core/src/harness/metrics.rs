//! Per-round metrics, subtask measurement, and the CSV / model file formats.
//!
//! `metrics.csv` columns:
//!
//! ```text
//! t, attack_active, main_acc, subtask_rate, train_loss, acc_0 .. acc_{C-1}, d, r, c
//! ```
//!
//! `attack_active` is 0/1, absent values are written as `nan`, and `r` / `c`
//! are bracketed, space-separated lists with one entry per sub-model in id
//! order (empty `[]` in baseline rounds).
//!
//! `detections.csv` has one row per sub-model and round:
//! `t, submodel, members, reports, penalty, flagged_classes, poisoned`.
//!
//! Wall-clock timings go to `timing.csv` so that the two files above are a
//! pure function of configuration and seed.

use std::fmt::Display;
use std::io::{self, BufRead, Write};

use crate::attacks::{AttackKind, AttackSpec};
use crate::error::{Error, Result};
use crate::federation::ClientId;
use crate::model::{predict_all, Dataset, ModelKind, ModelSpec, ParameterVector};

#[derive(Debug, Clone, PartialEq)]
pub struct SubModelRecord {
    pub id: usize,
    pub members: Vec<ClientId>,
    /// Distinct evaluators that flagged this sub-model.
    pub reports: usize,
    pub penalty: f64,
    pub flagged_classes: Vec<usize>,
    /// Ground truth: contains an active attacker's update.
    pub poisoned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub attack_active: bool,
    pub main_accuracy: f64,
    pub subtask_success: Option<f64>,
    pub train_loss: f64,
    pub class_accuracy: Vec<Option<f64>>,
    pub submodels: Vec<SubModelRecord>,
    pub wall_ms: f64,
}

impl MetricsRecord {
    pub fn penalties(&self) -> Vec<f64> {
        self.submodels.iter().map(|s| s.penalty).collect()
    }

    /// Ids of sub-models with at least one report.
    pub fn flagged_submodels(&self) -> Vec<usize> {
        self.submodels.iter().filter(|s| s.reports > 0).map(|s| s.id).collect()
    }
}

/// Attack success on held-out data.
///
/// Label flip: share of true-`src` samples predicted `dst`. Backdoor: share of
/// trigger-matching samples predicted `target`. Mislabel: share of samples
/// outside `target` predicted `target`.
pub fn measure_subtask(spec: &ModelSpec, params: &ParameterVector, attack: &AttackSpec, test: &Dataset) -> Result<f64> {
    let (subset, goal): (Vec<_>, usize) = match attack.kind {
        AttackKind::LabelFlip { src, dst } => (
            test.samples().iter().filter(|s| s.label == src).cloned().collect(),
            dst,
        ),
        AttackKind::Backdoor { trigger, target, .. } => (
            test.samples().iter().filter(|s| trigger.matches(s)).cloned().collect(),
            target,
        ),
        AttackKind::Mislabel { target, .. } => (
            test.samples().iter().filter(|s| s.label != target).cloned().collect(),
            target,
        ),
    };
    if subset.is_empty() {
        return Err(Error::input("no test samples to measure the subtask on"));
    }
    let hits = predict_all(spec, params, &subset)?.into_iter().filter(|&p| p == goal).count();
    Ok(hits as f64 / subset.len() as f64)
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), num)
}

fn list<T: Display>(items: impl IntoIterator<Item = T>) -> String {
    let inner: Vec<String> = items.into_iter().map(|x| x.to_string()).collect();
    format!("[{}]", inner.join(" "))
}

pub fn metrics_header(num_classes: usize) -> String {
    let mut cols: Vec<String> = ["t", "attack_active", "main_acc", "subtask_rate", "train_loss"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..num_classes).map(|c| format!("acc_{c}")));
    cols.extend(["d", "r", "c"].iter().map(|s| s.to_string()));
    cols.join(",")
}

pub fn metrics_row(rec: &MetricsRecord) -> String {
    let mut cols = vec![
        rec.round.to_string(),
        u8::from(rec.attack_active).to_string(),
        num(rec.main_accuracy),
        opt(rec.subtask_success),
        num(rec.train_loss),
    ];
    cols.extend(rec.class_accuracy.iter().map(|a| opt(*a)));
    cols.push(rec.submodels.len().to_string());
    cols.push(list(rec.submodels.iter().map(|s| s.reports)));
    cols.push(list(rec.submodels.iter().map(|s| num(s.penalty))));
    cols.join(",")
}

pub const DETECTIONS_HEADER: &str = "t,submodel,members,reports,penalty,flagged_classes,poisoned";

pub fn detection_rows(rec: &MetricsRecord) -> Vec<String> {
    rec.submodels
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{},{},{},{}",
                rec.round,
                s.id,
                list(&s.members),
                s.reports,
                num(s.penalty),
                list(&s.flagged_classes),
                u8::from(s.poisoned)
            )
        })
        .collect()
}

const MODEL_MAGIC: &str = "fedxval-model 1";

/// Text header (`key value` lines ending with `end`) followed by the
/// parameters as little-endian `f64`.
pub fn write_model<W: Write>(w: &mut W, spec: &ModelSpec, params: &ParameterVector) -> Result<()> {
    writeln!(w, "{MODEL_MAGIC}")?;
    writeln!(w, "kind {}", spec.kind_name())?;
    writeln!(w, "input_dim {}", spec.input_dim)?;
    writeln!(w, "hidden_dim {}", spec.hidden_dim())?;
    writeln!(w, "num_classes {}", spec.num_classes)?;
    writeln!(w, "params {}", params.dim())?;
    writeln!(w, "end")?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: BufRead>(r: &mut R) -> Result<(ModelSpec, ParameterVector)> {
    let mut offset = 0usize;
    let mut line = String::new();
    let mut next_line = |r: &mut R, offset: &mut usize| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::format(*offset, "model header ends early"));
        }
        *offset += n;
        Ok(line.trim_end().to_string())
    };
    if next_line(r, &mut offset)? != MODEL_MAGIC {
        return Err(Error::format(0, "not a model file"));
    }
    let mut fields = std::collections::BTreeMap::new();
    loop {
        let start = offset;
        let l = next_line(r, &mut offset)?;
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once(' ')
            .ok_or_else(|| Error::format(start, format!("bad header line `{l}`")))?;
        fields.insert(k.to_string(), (start, v.to_string()));
    }
    let get = |k: &str| -> Result<(usize, String)> {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| Error::format(offset, format!("header lacks `{k}`")))
    };
    let get_usize = |k: &str| -> Result<usize> {
        let (at, v) = get(k)?;
        v.parse().map_err(|_| Error::format(at, format!("`{k}` is not an integer")))
    };
    let (input_dim, hidden, classes, count) = (
        get_usize("input_dim")?,
        get_usize("hidden_dim")?,
        get_usize("num_classes")?,
        get_usize("params")?,
    );
    let spec = match get("kind")?.1.as_str() {
        "softmax-linear" => ModelSpec::softmax_linear(input_dim, classes),
        "mlp" => ModelSpec {
            kind: ModelKind::Mlp { hidden_dim: hidden },
            input_dim,
            num_classes: classes,
        },
        other => return Err(Error::format(offset, format!("unknown model kind `{other}`"))),
    };
    if spec.param_count() != count {
        return Err(Error::format(offset, "parameter count does not match the model spec"));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * count {
        return Err(Error::format(
            offset + bytes.len().min(8 * count),
            format!("expected {} parameter bytes, found {}", 8 * count, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((spec, ParameterVector::from_vec(values)))
}

/// Writes rows as they arrive and flushes after each round.
pub struct CsvSink<W: Write> {
    inner: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut inner: W, header: &str) -> io::Result<Self> {
        writeln!(inner, "{header}")?;
        Ok(Self { inner })
    }

    pub fn rows<I: IntoIterator<Item = String>>(&mut self, rows: I) -> io::Result<()> {
        for r in rows {
            writeln!(self.inner, "{r}")?;
        }
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{ScalingSpec, Trigger};
    use crate::model::{init_model, Sample};

    #[test]
    fn model_file_roundtrip_and_truncation() {
        let spec = ModelSpec::mlp(3, 4, 2);
        let params = init_model(&spec, 5);
        let mut buf = Vec::new();
        write_model(&mut buf, &spec, &params).unwrap();
        let (s2, p2) = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!((s2, p2), (spec, params));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_model(&mut &cut[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn row_formatting() {
        let rec = MetricsRecord {
            round: 3,
            attack_active: true,
            main_accuracy: 0.5,
            subtask_success: None,
            train_loss: 1.25,
            class_accuracy: vec![Some(1.0), None],
            submodels: vec![SubModelRecord {
                id: 0,
                members: vec![ClientId(2), ClientId(5)],
                reports: 2,
                penalty: 0.0,
                flagged_classes: vec![1],
                poisoned: true,
            }],
            wall_ms: 1.0,
        };
        assert_eq!(metrics_header(2), "t,attack_active,main_acc,subtask_rate,train_loss,acc_0,acc_1,d,r,c");
        assert_eq!(metrics_row(&rec), "3,1,0.5,nan,1.25,1,nan,1,[2],[0]");
        assert_eq!(detection_rows(&rec), vec!["3,0,[2 5],2,0,[1],1".to_string()]);
    }

    #[test]
    fn subtask_measurement() {
        // constant model predicting class 1
        let spec = ModelSpec::softmax_linear(1, 3);
        let params = ParameterVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 9.0, 0.0]);
        let test = Dataset::new(
            vec![Sample::new(vec![1.0], 0), Sample::new(vec![2.0], 0), Sample::new(vec![3.0], 2)],
            3,
        )
        .unwrap();
        let flip = AttackSpec {
            kind: AttackKind::LabelFlip { src: 0, dst: 1 },
            scaling: ScalingSpec::None,
        };
        assert_eq!(measure_subtask(&spec, &params, &flip, &test).unwrap(), 1.0);
        let backdoor = AttackSpec {
            kind: AttackKind::Backdoor {
                trigger: Trigger {
                    class: 0,
                    feature: 0,
                    threshold: 10.0,
                },
                target: 1,
                augment_copies: 0,
                jitter_scale: 0.0,
            },
            scaling: ScalingSpec::None,
        };
        assert!(measure_subtask(&spec, &params, &backdoor, &test).is_err());
    }
}
