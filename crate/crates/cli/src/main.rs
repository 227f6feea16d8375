fn main() {
    println!("cml");
}
