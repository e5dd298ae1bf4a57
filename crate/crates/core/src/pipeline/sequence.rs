use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Boundary markers, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    QuestionStart,
    QuestionEnd,
    AbstractStart,
    AbstractEnd,
    ImageStart,
    ImageEnd,
}

impl Marker {
    pub const ALL: [Marker; 6] = [
        Marker::QuestionStart,
        Marker::QuestionEnd,
        Marker::AbstractStart,
        Marker::AbstractEnd,
        Marker::ImageStart,
        Marker::ImageEnd,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn token(self) -> &'static str {
        match self {
            Marker::QuestionStart => "[Q]",
            Marker::QuestionEnd => "[/Q]",
            Marker::AbstractStart => "[ABS]",
            Marker::AbstractEnd => "[/ABS]",
            Marker::ImageStart => "[IMG]",
            Marker::ImageEnd => "[/IMG]",
        }
    }
}

/// One embedding row per [`Marker`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialTokens(pub Matrix);

impl SpecialTokens {
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self(Matrix::random_normal(Marker::ALL.len(), dim, 0.0, 1.0, rng))
    }

    pub fn embedding(&self, m: Marker) -> &[f64] {
        self.0.row(m.index())
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Marker(Marker),
    Question,
    Abstract,
    Image,
}

/// `[Q] question [/Q] [ABS] abstraction [/ABS] [IMG] fused image [/IMG]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSequence {
    pub rows: Matrix,
    pub kinds: Vec<RowKind>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn marker_positions(&self) -> Vec<(usize, Marker)> {
        self.kinds
            .iter()
            .enumerate()
            .filter_map(|(i, k)| match k {
                RowKind::Marker(m) => Some((i, *m)),
                _ => None,
            })
            .collect()
    }
}

pub fn assemble_sequence(
    question: &Matrix,
    abstraction: &Matrix,
    fused: &Matrix,
    specials: &SpecialTokens,
) -> Result<AssembledSequence> {
    let d = specials.dim();
    for (name, m) in [("question", question), ("abstraction", abstraction), ("fused", fused)] {
        if m.cols() != d {
            return Err(Error::Config(format!(
                "{name} features have {} columns, special tokens have {d}",
                m.cols()
            )));
        }
    }
    let total = question.rows() + abstraction.rows() + fused.rows() + Marker::ALL.len();
    let mut data = Vec::with_capacity(total * d);
    let mut kinds = Vec::with_capacity(total);
    let segments = [
        (Marker::QuestionStart, question, RowKind::Question, Marker::QuestionEnd),
        (Marker::AbstractStart, abstraction, RowKind::Abstract, Marker::AbstractEnd),
        (Marker::ImageStart, fused, RowKind::Image, Marker::ImageEnd),
    ];
    for (open, content, kind, close) in segments {
        data.extend_from_slice(specials.embedding(open));
        kinds.push(RowKind::Marker(open));
        data.extend_from_slice(content.as_slice());
        kinds.extend(std::iter::repeat_n(kind, content.rows()));
        data.extend_from_slice(specials.embedding(close));
        kinds.push(RowKind::Marker(close));
    }
    Ok(AssembledSequence {
        rows: Matrix::from_vec(total, d, data)?,
        kinds,
    })
}
