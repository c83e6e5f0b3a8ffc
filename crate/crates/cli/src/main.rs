use clap::Parser;

fn main() {
    let cli = gloss2pose_cli::Cli::parse();
    if let Err(e) = gloss2pose_cli::run(cli) {
        eprintln!("{}", gloss2pose_cli::error_line(&e));
        std::process::exit(1);
    }
}
