fn main() {
    std::process::exit(prion_vit::cli::cli_dispatch(std::env::args_os()));
}
