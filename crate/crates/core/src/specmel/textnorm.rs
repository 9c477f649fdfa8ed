//! Caption normalization: lowercase, commas kept as separate tokens, all
//! other punctuation removed, whitespace collapsed, and standalone integers
//! up to one hundred spelled out in words.

fn spell_small(n: u32) -> &'static str {
    const ONES: [&str; 20] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
        "nineteen",
    ];
    ONES[n as usize]
}

fn spell_tens(n: u32) -> &'static str {
    const TENS: [&str; 10] = [
        "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
    ];
    TENS[n as usize]
}

/// Spell an integer 0..=100 in words ("21" → "twenty one").
pub fn spell_number(n: u32) -> String {
    match n {
        0..=19 => spell_small(n).to_string(),
        20..=99 => {
            let tens = spell_tens(n / 10);
            if n % 10 == 0 {
                tens.to_string()
            } else {
                format!("{tens} {}", spell_small(n % 10))
            }
        }
        100 => "one hundred".to_string(),
        _ => unreachable!("spell_number only covers 0..=100"),
    }
}

/// Normalize a caption to the canonical lowercase token form.
pub fn normalize_text(text: &str) -> String {
    let lowered = text.to_lowercase();
    let mut cleaned = String::with_capacity(lowered.len() + 8);
    for ch in lowered.chars() {
        if ch == ',' {
            cleaned.push(' ');
            cleaned.push(',');
            cleaned.push(' ');
        } else if ch.is_alphanumeric() || ch.is_whitespace() {
            cleaned.push(ch);
        }
        // Any other punctuation is dropped entirely.
    }
    let mut out: Vec<String> = Vec::new();
    for tok in cleaned.split_whitespace() {
        if let Ok(n) = tok.parse::<u32>() {
            if n <= 100 {
                out.push(spell_number(n));
                continue;
            }
        }
        out.push(tok.to_string());
    }
    out.join(" ")
}
