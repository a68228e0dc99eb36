fn main() {
    std::process::exit(eyedent::cli::main());
}
