use serde::{Deserialize, Serialize};

use super::{BenchmarkItem, ItemKind};
use crate::backends::sim::hidden_flag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grader {
    /// Option-letter extraction or normalized exact match against `gold`.
    #[default]
    Local,
    /// Reads the simulated backend's correctness marker from the conclusion.
    HiddenFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grade {
    pub correct: bool,
    /// No answer could be extracted; counted as incorrect.
    pub ungradable: bool,
}

impl Grade {
    fn of(correct: bool) -> Self {
        Grade {
            correct,
            ungradable: false,
        }
    }

    pub const UNGRADABLE: Grade = Grade {
        correct: false,
        ungradable: true,
    };
}

pub fn normalize_free_form(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn first_option_letter<'a>(conclusion: &str, letters: impl Fn(&str) -> bool + 'a) -> Option<String> {
    let cleaned: String = conclusion
        .trim()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_uppercase();
    cleaned
        .split_whitespace()
        .find(|tok| letters(tok))
        .map(str::to_string)
}

pub fn grade(item: &BenchmarkItem, conclusion: &str, grader: Grader) -> Grade {
    match grader {
        Grader::HiddenFlag => match hidden_flag(conclusion) {
            Some((ok, _)) => Grade::of(ok),
            None => Grade::UNGRADABLE,
        },
        Grader::Local => match &item.kind {
            ItemKind::MultipleChoice(options) => {
                match first_option_letter(conclusion, |t| options.contains_key(t)) {
                    Some(letter) => Grade::of(letter == item.gold),
                    None => Grade::UNGRADABLE,
                }
            }
            ItemKind::FreeForm => {
                let got = normalize_free_form(conclusion);
                if got.is_empty() {
                    Grade::UNGRADABLE
                } else {
                    Grade::of(got == normalize_free_form(&item.gold))
                }
            }
        },
    }
}
