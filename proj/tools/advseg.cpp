#include "advseg/cli.hpp"

int main(int argc, char** argv) { return advseg::run_cli(argc, argv); }
