fn main() {
    std::process::exit(mafnet::cli::run());
}
