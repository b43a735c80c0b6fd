//! Helpers shared by integration tests.

use signreg_core::gateway::{FnProvider, Gateway, GatewayError, LlmRequest, RequestTag};

/// Deterministic stand-in for a chat model: votes lean positive, and
/// discovery pairs adjacent modules from the prompt's module list.
pub fn scripted(req: &LlmRequest) -> Result<String, GatewayError> {
    let h = req.hash();
    let byte = u8::from_str_radix(&h[..2], 16).unwrap();
    match req.tag {
        RequestTag::Categorize => {
            let t = match byte % 5 {
                0 => "B",
                1 => "C",
                _ => "A",
            };
            Ok(format!("Explanation: scripted.\nAnswer: Type {t}"))
        }
        RequestTag::Discover => {
            let names: Vec<&str> = req
                .prompt
                .lines()
                .filter(|l| l.trim_start().starts_with('•'))
                .filter_map(|l| l.split('"').nth(1))
                .collect();
            let mut out = String::from("Answers:\n");
            for (i, w) in names.windows(2).enumerate() {
                out.push_str(&format!("New column {}: \"{}\"*\"{}\" | pair\n", i + 1, w[0], w[1]));
            }
            Ok(out)
        }
    }
}

pub fn scripted_gateway() -> Gateway {
    Gateway::new(Box::new(FnProvider::new("scripted", scripted)))
}
