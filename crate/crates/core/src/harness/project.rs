use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use super::checkpoint::Checkpoint;
use crate::autograd::Graph;
use crate::data::QAInstance;
use crate::error::{Error, Result};
use crate::objectives::{prepare_instance, PreparedInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventRoleTag {
    QuestionEvent,
    AnswerEvent,
    OtherEvent,
    NonEvent,
}

impl EventRoleTag {
    pub const ALL: [EventRoleTag; 4] = [Self::QuestionEvent, Self::AnswerEvent, Self::OtherEvent, Self::NonEvent];

    pub fn name(self) -> &'static str {
        match self {
            Self::QuestionEvent => "question-event",
            Self::AnswerEvent => "answer-event",
            Self::OtherEvent => "other-event",
            Self::NonEvent => "non-event",
        }
    }
}

impl fmt::Display for EventRoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventRoleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown token role {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub x: f64,
    pub y: f64,
    pub role: EventRoleTag,
    pub instance: String,
    pub epoch: String,
}

fn prepare(ckpt: &Checkpoint, inst: &QAInstance) -> Result<PreparedInstance> {
    let cfg = &ckpt.model.config;
    prepare_instance(inst, &ckpt.vocab, cfg.setting, cfg.tagging, ckpt.ablation.no_prefix, cfg.max_len)
}

/// Event-space vectors (transformed unless the transform is ablated) of
/// every token, one `d`-row each.
fn event_space(ckpt: &Checkpoint, ex: &PreparedInstance) -> Result<Vec<Vec<f64>>> {
    let model = &ckpt.model;
    let mut g = Graph::with_params(&model.store);
    let h = model.encode(&mut g, &ex.seq.ids, None)?;
    let all: Vec<usize> = (0..ex.seq.len()).collect();
    let rows = model.event_rows(&mut g, h, &all, !ckpt.ablation.no_transm)?;
    let d = g.shape(rows).1;
    Ok(g.value(rows).chunks(d).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect())
}

/// Projects every token of the sample onto the top two principal
/// components of the pooled event-space vectors.
pub fn project_embeddings(ckpt: &Checkpoint, sample: &[QAInstance], epoch: &str) -> Result<Vec<ProjectionRow>> {
    if sample.is_empty() {
        return Err(Error::Dataset("projection needs a non-empty sample".into()));
    }
    let mut vectors = Vec::new();
    let mut meta = Vec::new();
    for inst in sample {
        let ex = prepare(ckpt, inst)?;
        for (pos, v) in event_space(ckpt, &ex)?.into_iter().enumerate() {
            let role = if ex.events.question.contains(&pos) {
                EventRoleTag::QuestionEvent
            } else if ex.events.answer.contains(&pos) {
                EventRoleTag::AnswerEvent
            } else if ex.events.other.contains(&pos) {
                EventRoleTag::OtherEvent
            } else {
                EventRoleTag::NonEvent
            };
            vectors.push(v);
            meta.push((role, inst.id.clone()));
        }
    }
    let coords = pca_2d(&vectors)?;
    Ok(coords
        .into_iter()
        .zip(meta)
        .map(|((x, y), (role, instance))| ProjectionRow {
            x,
            y,
            role,
            instance,
            epoch: epoch.to_string(),
        })
        .collect())
}

/// Coordinates on the two leading principal axes. Each axis is signed so
/// that its largest-magnitude component is positive.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    if n == 0 || d < 2 {
        return Err(Error::Parameter("projection needs vectors of width at least 2".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|v| v * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(r, w)| r * w).sum::<f64>();
            (p(&axes[0]), p(&axes[1]))
        })
        .collect())
}

const HEADER: &str = "x\ty\trole\tinstance\tepoch";

pub fn write_projection(path: impl AsRef<Path>, rows: &[ProjectionRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.x, r.y, r.role, r.instance, r.epoch));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_projection(path: impl AsRef<Path>) -> Result<Vec<ProjectionRow>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Dataset(format!("{}: not a projection dump", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Dataset(format!("malformed projection row {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(ProjectionRow {
                x: f[0].parse().map_err(|_| bad())?,
                y: f[1].parse().map_err(|_| bad())?,
                role: f[2].parse()?,
                instance: f[3].to_string(),
                epoch: f[4].to_string(),
            })
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean cosine between question and answer event vectors minus mean cosine
/// between question and other event vectors, pooled over all pairs of all
/// instances.
pub fn alignment_gap(ckpt: &Checkpoint, instances: &[QAInstance]) -> Result<f64> {
    let (mut qa, mut n_qa, mut qo, mut n_qo) = (0.0, 0usize, 0.0, 0usize);
    for inst in instances {
        let ex = prepare(ckpt, inst)?;
        let rows = event_space(ckpt, &ex)?;
        for &q in &ex.events.question {
            for &a in &ex.events.answer {
                qa += cosine(&rows[q], &rows[a]);
                n_qa += 1;
            }
            for &o in &ex.events.other {
                qo += cosine(&rows[q], &rows[o]);
                n_qo += 1;
            }
        }
    }
    if n_qa == 0 || n_qo == 0 {
        return Err(Error::Dataset("alignment gap needs question, answer and other events".into()));
    }
    Ok(qa / n_qa as f64 - qo / n_qo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_recovers_dominant_axis() {
        let v: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.01 * ((i * 7) % 5) as f64, 0.0]).collect();
        let p = pca_2d(&v).unwrap();
        // first coordinate is the centered index
        for (i, (x, _)) in p.iter().enumerate() {
            assert!((x - (i as f64 - 9.5)).abs() < 1e-3, "{i}: {x}");
        }
    }

    #[test]
    fn role_names_round_trip() {
        for r in EventRoleTag::ALL {
            assert_eq!(r.name().parse::<EventRoleTag>().unwrap(), r);
        }
        assert!("event".parse::<EventRoleTag>().is_err());
    }
}
