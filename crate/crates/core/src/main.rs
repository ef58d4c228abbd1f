fn main() {
    std::process::exit(retro_pager::cli::run(std::env::args_os()));
}
