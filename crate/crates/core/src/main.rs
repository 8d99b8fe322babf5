fn main() {
    std::process::exit(classfuse::cli::run(std::env::args_os()));
}
