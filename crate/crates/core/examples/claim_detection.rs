//! Novel visual claim detection against the shipped lexicon.
//!
//! cargo run --example claim_detection

use groundcheck::claims::{nvc_indicator, VisualLexicon};

fn main() {
    let lexicon = VisualLexicon::shipped();
    println!("lexicon {} with {} terms", lexicon.version, lexicon.term_count());
    let question = "Is there an enlarged lymph node in the left hilum?";
    let rationales = [
        "There is an enlarged lymph node in the left hilum.",
        "A 2 cm round opacity is visible in the right upper lobe. No effusion.",
        "Based on typical presentations the answer is probably yes.",
    ];
    for rationale in rationales {
        let result = nvc_indicator(rationale, question, &lexicon);
        println!("\nNVC = {}  {rationale}", result.nvc);
        for span in &result.spans {
            let terms: Vec<String> = span
                .matched_terms
                .iter()
                .map(|t| format!("{}:{}", t.category, t.term))
                .collect();
            println!("  sentence {} novel={} terms [{}]", span.sentence_index, span.novel, terms.join(", "));
        }
    }
}
