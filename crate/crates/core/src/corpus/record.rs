// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EOS, INPUT, RST, TASK_COPY, TASK_LOOKUP, TASK_REVERSE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lang {
    /// High-resource language (English analog).
    LangA,
    /// Low-resource language.
    LangB,
}

impl Lang {
    pub fn as_str(self) -> &'static str {
        match self {
            Lang::LangA => "lang_a",
            Lang::LangB => "lang_b",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Lookup,
    /// Translation instruction built by the `+MT` augmentation.
    Mt,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Lookup => "lookup",
            TaskKind::Mt => "mt",
        }
    }

    /// Control token placed after `[input]`; translation records carry
    /// their own marker inside `x`.
    fn marker(self) -> Option<usize> {
        match self {
            TaskKind::Copy => Some(TASK_COPY),
            TaskKind::Reverse => Some(TASK_REVERSE),
            TaskKind::Lookup => Some(TASK_LOOKUP),
            TaskKind::Mt => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "lookup" => Ok(TaskKind::Lookup),
            "mt" => Ok(TaskKind::Mt),
            other => Err(Error::invalid(format!("unknown task kind `{other}`"))),
        }
    }
}

/// One supervised example with its parallel rendering in language A.
///
/// Field order is the JSONL field order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub id: u64,
    pub lang: Lang,
    pub task: TaskKind,
    pub x: Vec<usize>,
    /// Language-A rendering of `x`; equal to `x` for language-A records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_en: Option<Vec<usize>>,
    pub y: Vec<usize>,
}

/// A token sequence in the `[input] ... [output] ...` template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<usize>,
    /// Index of the response start token.
    pub rst_pos: usize,
}

impl Rendered {
    /// Position right before the response start token, where activations
    /// are read and fusion vectors injected.
    pub fn tap(&self) -> usize {
        self.rst_pos - 1
    }

    /// Teacher-forcing inputs, next-token targets, and the loss mask
    /// covering the answer span (answer tokens and the closing EOS).
    pub fn training_view(&self) -> (&[usize], Vec<usize>, Vec<bool>) {
        let n = self.tokens.len();
        let inputs = &self.tokens[..n - 1];
        let targets = self.tokens[1..].to_vec();
        let mask = (0..n - 1).map(|t| t >= self.rst_pos).collect();
        (inputs, targets, mask)
    }
}

pub(crate) fn render_prompt(task: TaskKind, x: &[usize]) -> Rendered {
    let mut tokens = Vec::with_capacity(x.len() + 3);
    tokens.push(INPUT);
    tokens.extend(task.marker());
    tokens.extend_from_slice(x);
    let rst_pos = tokens.len();
    tokens.push(RST);
    Rendered { tokens, rst_pos }
}

impl ParallelExample {
    pub fn x_en(&self) -> Result<&[usize]> {
        self.x_en
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("record {} has no x_en", self.id)))
    }

    /// `[input] <task> x [output]`.
    pub fn prompt(&self) -> Rendered {
        render_prompt(self.task, &self.x)
    }

    /// `[input] <task> x_en [output]`, the parallel English prompt.
    pub fn prompt_en(&self) -> Result<Rendered> {
        Ok(render_prompt(self.task, self.x_en()?))
    }

    /// Full training sequence `[input] <task> x [output] y <eos>`.
    pub fn render(&self) -> Rendered {
        let mut r = self.prompt();
        r.tokens.extend_from_slice(&self.y);
        r.tokens.push(EOS);
        r
    }

    /// Whether training and inference route this record through fusion.
    pub fn takes_fusion(&self) -> bool {
        self.lang != Lang::LangA
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> ParallelExample {
        ParallelExample {
            id: 0,
            lang: Lang::LangB,
            task: TaskKind::Reverse,
            x: vec![40, 41, 42],
            x_en: Some(vec![20, 21, 22]),
            y: vec![42, 41, 40],
        }
    }

    #[test]
    fn template_has_one_rst_outside_content() {
        let r = example().render();
        assert_eq!(
            r.tokens,
            vec![INPUT, TASK_REVERSE, 40, 41, 42, RST, 42, 41, 40, EOS]
        );
        assert_eq!(r.tokens.iter().filter(|&&t| t == RST).count(), 1);
        assert_eq!(r.tap(), 4);
    }

    #[test]
    fn loss_mask_covers_answer_span() {
        let r = example().render();
        let (inputs, targets, mask) = r.training_view();
        assert_eq!(inputs.len(), 9);
        let picked: Vec<usize> = targets
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        assert_eq!(picked, vec![42, 41, 40, EOS]);
    }

    #[test]
    fn english_prompt_shares_positions() {
        let ex = example();
        assert_eq!(ex.prompt().tap(), ex.prompt_en().unwrap().tap());
    }
}
