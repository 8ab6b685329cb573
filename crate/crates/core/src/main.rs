fn main() {
    std::process::exit(hybrid_diffusion::cli::run(std::env::args_os()));
}
