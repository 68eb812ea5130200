/// Lowercase, then split on every character that is not alphanumeric in the
/// Unicode sense (`char::is_alphanumeric`). Empty tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_on_punctuation() {
        assert_eq!(
            tokenize("Infusion of prostacyclin (PGI2)"),
            ["infusion", "of", "prostacyclin", "pgi2"]
        );
    }

    #[test]
    fn empty_input() {
        assert!(tokenize("").is_empty());
        assert!(tokenize(" -- ").is_empty());
    }

    proptest! {
        #[test]
        fn idempotent_on_joined_output(s in ".{0,64}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }
}
