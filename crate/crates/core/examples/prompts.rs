//! The two prompt encodings for one example, and how they tokenize.

use sasrecllm::fusion::{build_prompt, UserSlot};
use sasrecllm::vocab::Vocab;

fn main() -> Result<(), sasrecllm::Error> {
    let history = ["Toy Story (1995)", "Jumanji (1995)"];
    let p = build_prompt(&history, "Fargo (1996)", UserSlot { user: 7, history: vec![1, 2] }, 608)?;
    println!("hybrid:\n  {}\n", p.render());
    println!("text only:\n  {}\n", p.render_textual());

    let vocab = Vocab::build([p.render().as_str()]);
    let ids = vocab.tokenize(&p.render());
    println!("{} tokens, vocabulary of {}", ids.len(), vocab.len());
    let shown: Vec<&str> = ids.iter().take(12).filter_map(|&i| vocab.token(i)).collect();
    println!("first tokens: {shown:?}");
    Ok(())
}
