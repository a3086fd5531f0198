//! Tokenizer behavior: greedy longest match, byte fallback totality, the
//! image placeholder, and vocab files.
//!
//! ```bash
//! cargo run --example tokenizer_roundtrip
//! ```

use mobilevlm::pipeline::{Tokenizer, IMAGE_TOKEN};

fn main() -> mobilevlm::Result<()> {
    // With no vocabulary at all, every byte maps to its own token id.
    let empty = Tokenizer::empty();
    let ids = empty.tokenize("ab");
    println!(
        "empty vocab: \"ab\" -> {ids:?} -> {:?}",
        empty.detokenize(&ids)
    );

    // Vocab entries win by longest match; ids 0..=258 are reserved for the
    // byte table and the specials.
    let tok = Tokenizer::from_entries([
        ("he".to_string(), 259u32),
        ("hell".to_string(), 260),
        ("hello".to_string(), 261),
        ("world".to_string(), 262),
    ])?;
    for s in ["hello world", "hells bells", "hell"] {
        let ids = tok.tokenize(s);
        println!("{s:?} -> {ids:?} -> {:?}", tok.detokenize(&ids));
        assert_eq!(tok.detokenize(&ids), s);
    }

    // The image placeholder is one token and round-trips like any text.
    let ids = tok.tokenize("look: <image> here");
    println!("placeholder -> {ids:?}");
    assert!(ids.contains(&IMAGE_TOKEN));
    assert_eq!(tok.detokenize(&ids), "look: <image> here");

    // Arbitrary UTF-8 survives: unmatched bytes fall back one by one.
    for s in ["naïve café 🦀", "\u{10348}\u{0301}", "tab\tand\nnewline"] {
        let ids = tok.tokenize(s);
        assert_eq!(tok.detokenize(&ids), s);
        println!("{:>4} tokens for {s:?}", ids.len());
    }

    // Vocab files are plain "token<TAB>id" lines.
    let path = std::env::temp_dir().join("mvlm_example_vocab.txt");
    std::fs::write(&path, "hello\t259\nworld\t260\n")?;
    let from_file = Tokenizer::from_vocab_file(&path)?;
    println!(
        "vocab file: {} entries, \"hello world\" -> {:?}",
        from_file.vocab_len(),
        from_file.tokenize("hello world")
    );
    Ok(())
}
