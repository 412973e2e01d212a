//! Reader input and target strings for the supported task formats.

use crate::evalkit::debias::LETTERS;

pub const ANSWER_SENTINEL: &str = "[MASK_0]";

pub fn choice_input(question: &str, options: &[String; 4]) -> String {
    format!(
        "question: {question}\noptions: (A) {} (B) {} (C) {} (D) {}\nanswer: {ANSWER_SENTINEL}",
        options[0], options[1], options[2], options[3]
    )
}

pub fn choice_target(letter: usize) -> String {
    format!("{ANSWER_SENTINEL} {}", LETTERS[letter])
}

pub fn qa_input(question: &str) -> String {
    format!("question: {question} answer: {ANSWER_SENTINEL}")
}

pub fn qa_target(answer: &str) -> String {
    format!("{ANSWER_SENTINEL} {answer}")
}
