/// Splits a class definition into lowercase word tokens.
///
/// Anything that is not a letter, digit or apostrophe separates tokens.
/// Stopwords are kept: down-weighting them is the job of the attention
/// weights, not of the tokenizer.
pub fn tokenize_definition(raw: &str) -> Vec<String> {
    // Lowercase before splitting so that case mappings producing
    // non-alphanumeric marks (e.g. U+0130) split the same way on a re-run.
    raw.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Splits a WordNet-style lemma (`black_cat`, `new york`) into its words.
pub fn tokenize_lemma(lemma: &str) -> Vec<String> {
    lemma
        .split(['_', ' '])
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn punctuation_and_case() {
        assert_eq!(
            tokenize_definition("A dark, feline animal."),
            ["a", "dark", "feline", "animal"]
        );
    }

    #[test]
    fn empty() {
        assert!(tokenize_definition("").is_empty());
        assert!(tokenize_definition(" ,;. ").is_empty());
    }

    #[test]
    fn hyphen_splits() {
        assert_eq!(tokenize_definition("man-made object"), ["man", "made", "object"]);
    }

    #[test]
    fn apostrophe_kept() {
        assert_eq!(tokenize_definition("the cat's toy"), ["the", "cat's", "toy"]);
    }

    #[test]
    fn lemma_split() {
        assert_eq!(tokenize_lemma("black_cat"), ["black", "cat"]);
        assert_eq!(tokenize_lemma("new york__city"), ["new", "york", "city"]);
        assert_eq!(tokenize_lemma("Cat"), ["Cat"]);
    }

    proptest! {
        #[test]
        fn idempotent_on_joined_output(s in "\\PC{0,64}") {
            let once = tokenize_definition(&s);
            let twice = tokenize_definition(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
