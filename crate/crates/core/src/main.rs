fn main() {
    let code = insect_fm::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
