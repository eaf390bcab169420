//! Tag extraction and answer normalization.
//!
//! cargo run --example parse_answers

use groundcheck::parsing::{extract_tagged, Normalizer};

fn main() {
    let outputs = [
        "<think>Hypodense area in segment VI.</think><answer>B. Liver</answer>",
        "<think>unclosed rationale <answer>The answer is yes.</answer>",
        "Reasoning on one line.\nFinal answer: No",
        "<answer>(c)</answer>",
    ];
    for text in outputs {
        let parsed = extract_tagged(text);
        println!("{:?}: rationale {:?} answer {:?}", parsed.extraction_path, parsed.rationale, parsed.answer_text);
    }

    let normalizer = Normalizer::default();
    let options: Vec<String> = ["Spleen", "Liver", "Kidney"].map(String::from).to_vec();
    for answer in ["B", "b) liver", "The answer is Liver.", "liver", "(c)", "Yes, clearly", "Correct"] {
        let norm = normalizer.normalize(answer, Some(&options));
        println!(
            "{answer:<22} -> {:<8} letter {:?}  gold Liver: {}",
            norm.canonical,
            norm.option_letter,
            normalizer.is_correct(&norm, "Liver", Some(&options))
        );
    }
    println!("normalization version {}", normalizer.version());
}
