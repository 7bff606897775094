fn main() {
    std::process::exit(ideolens_cli::run(std::env::args_os()));
}
