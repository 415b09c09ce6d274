version = '0.1+git'
