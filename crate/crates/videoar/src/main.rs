use std::io::{self, BufWriter, Write};

fn main() {
    let mut stdout = BufWriter::new(io::stdout().lock());
    let code = videoar::cli::main_with(std::env::args(), &mut stdout, &mut io::stderr());
    let flushed = stdout.flush();
    drop(stdout);
    if let Err(e) = flushed {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    std::process::exit(code);
}
