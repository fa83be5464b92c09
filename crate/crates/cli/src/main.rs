fn main() {
    println!("xnmoe");
}
