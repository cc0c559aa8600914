#include <cstdio>
int main(int,char**){std::puts("todo");return 1;}
