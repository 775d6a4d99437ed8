use serde::{Deserialize, Serialize};

use crate::error::{RaveError, Result};

/// The four input segments of a multimodal sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    System,
    Image,
    Question,
    Answer,
}

impl Segment {
    pub const ALL: [Segment; 4] = [
        Segment::System,
        Segment::Image,
        Segment::Question,
        Segment::Answer,
    ];

    pub fn index(self) -> usize {
        match self {
            Segment::System => 0,
            Segment::Image => 1,
            Segment::Question => 2,
            Segment::Answer => 3,
        }
    }

    /// Short name used in file names and CSV headers.
    pub fn short_name(self) -> &'static str {
        match self {
            Segment::System => "sys",
            Segment::Image => "img",
            Segment::Question => "que",
            Segment::Answer => "ans",
        }
    }

    pub fn parse(s: &str) -> Option<Segment> {
        Segment::ALL.into_iter().find(|seg| seg.short_name() == s)
    }
}

/// Partition of the (0-based) token positions `0..N` into system, image,
/// question and answer index sets.
///
/// Answer positions always follow every prefill position, since answers are
/// appended during decoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    system: Vec<usize>,
    image: Vec<usize>,
    question: Vec<usize>,
    answer: Vec<usize>,
}

impl SegmentMap {
    pub fn new(
        system: Vec<usize>,
        image: Vec<usize>,
        question: Vec<usize>,
        answer: Vec<usize>,
    ) -> Result<Self> {
        let map = SegmentMap {
            system,
            image,
            question,
            answer,
        };
        map.validate()?;
        Ok(map)
    }

    /// Consecutive spans `[sys][img][que][ans]`.
    pub fn contiguous(n_sys: usize, n_img: usize, n_que: usize, n_ans: usize) -> Self {
        let a = n_sys;
        let b = a + n_img;
        let c = b + n_que;
        SegmentMap {
            system: (0..a).collect(),
            image: (a..b).collect(),
            question: (b..c).collect(),
            answer: (c..c + n_ans).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n];
        for seg in Segment::ALL {
            let idx = self.indices(seg);
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(RaveError::Config(format!(
                    "segment {} indices are not strictly increasing",
                    seg.short_name()
                )));
            }
            for &p in idx {
                if p >= n || seen[p] {
                    return Err(RaveError::Config(format!(
                        "position {p} is out of range or assigned to more than one segment"
                    )));
                }
                seen[p] = true;
            }
        }
        if let Some(&first_answer) = self.answer.first() {
            let last_prefill = [&self.system, &self.image, &self.question]
                .iter()
                .filter_map(|s| s.last().copied())
                .max();
            if last_prefill.is_some_and(|p| p > first_answer) {
                return Err(RaveError::Config(
                    "answer positions must come after every prefill position".into(),
                ));
            }
        }
        Ok(())
    }

    /// Total number of positions `N`.
    pub fn len(&self) -> usize {
        self.system.len() + self.image.len() + self.question.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self, seg: Segment) -> &[usize] {
        match seg {
            Segment::System => &self.system,
            Segment::Image => &self.image,
            Segment::Question => &self.question,
            Segment::Answer => &self.answer,
        }
    }

    /// Segment label of every position.
    pub fn labels(&self) -> Vec<Segment> {
        let mut out = vec![Segment::System; self.len()];
        for seg in Segment::ALL {
            for &p in self.indices(seg) {
                out[p] = seg;
            }
        }
        out
    }

    pub fn contains(&self, seg: Segment, position: usize) -> bool {
        self.indices(seg).binary_search(&position).is_ok()
    }

    /// Appends a new answer token at position `N` and returns that position.
    pub fn push_answer(&mut self) -> usize {
        let p = self.len();
        self.answer.push(p);
        p
    }

    /// Number of prefill positions (everything before the answer).
    pub fn prompt_len(&self) -> usize {
        self.len() - self.answer.len()
    }

    /// The same map with all answer positions removed.
    pub fn prompt_only(&self) -> SegmentMap {
        SegmentMap {
            answer: Vec::new(),
            ..self.clone()
        }
    }
}
