#include "cmssl/cli.hpp"

int main(int argc, char** argv) { return cmssl::run_cli(argc, argv); }
